//! Traffic movies and road maps: storage, normalisation, windowing, splits
//! and batching.
//!
//! On disk a dataset directory holds one sub-directory per city:
//!
//! ```text
//! <dir>/<city>/road.gtc               (H, W)
//! <dir>/<city>/movies/movie_000.gtc   (T, H, W, 8)
//! ```

pub mod container;
pub mod norm;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::FRAME_CHANNELS;
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::topology::{extract_prior, RoadMap, TopologyPrior};

pub use norm::{normalize_road, NormStats};

pub const ROAD_FILE: &str = "road.gtc";
pub const MOVIE_DIR: &str = "movies";

/// Window starts `0, stride, 2·stride, ...` with `s + T_in + T_out <= T`.
pub fn window_indices(t: usize, t_in: usize, t_out: usize, stride: usize) -> Vec<usize> {
    let span = t_in + t_out;
    if stride == 0 || t < span {
        return Vec::new();
    }
    (0..=t - span).step_by(stride).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FileSplit {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

/// Seeded shuffle, then `floor(0.70 n)` / `floor(0.15 n)` / remainder.
pub fn split_files(files: &[PathBuf], seed: u64) -> Result<FileSplit> {
    let n = files.len();
    if n < 3 {
        return Err(Error::Validation(format!("splitting needs at least 3 files, got {n}")));
    }
    let mut order: Vec<PathBuf> = files.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    if n_val == 0 {
        log::warn!("{n} files leave the validation split empty");
    }
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(FileSplit { train: order, val, test })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CityFiles {
    pub name: String,
    pub road: PathBuf,
    pub movies: Vec<PathBuf>,
}

/// Cities under `dir`, sorted by name, movies sorted by file name.
pub fn discover(dir: impl AsRef<Path>) -> Result<Vec<CityFiles>> {
    let dir = dir.as_ref();
    let mut cities = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::Validation(format!("data dir {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let road = path.join(ROAD_FILE);
        let movie_dir = path.join(MOVIE_DIR);
        if !road.is_file() || !movie_dir.is_dir() {
            continue;
        }
        let mut movies: Vec<PathBuf> = fs::read_dir(&movie_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "gtc"))
            .collect();
        movies.sort();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        cities.push(CityFiles { name, road, movies });
    }
    cities.sort_by(|a, b| a.name.cmp(&b.name));
    if cities.is_empty() {
        return Err(Error::Validation(format!("no cities found under {}", dir.display())));
    }
    Ok(cities)
}

/// Zero-pads the trailing spatial axes up to multiples of `m`.
/// `h_axis` is the index of H; W follows it.
pub fn pad_spatial<S: Scalar>(t: &Tensor<S>, h_axis: usize, m: usize) -> Result<Tensor<S>> {
    let s = t.shape();
    if h_axis + 1 >= s.len() {
        return Err(dim_err!("no spatial axes at {h_axis} in {s:?}"));
    }
    let (h, w) = (s[h_axis], s[h_axis + 1]);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let outer: usize = s[..h_axis].iter().product();
    let inner: usize = s[h_axis + 2..].iter().product();
    let mut shape = s.to_vec();
    shape[h_axis] = ph;
    shape[h_axis + 1] = pw;
    let mut out = Tensor::zeros(&shape);
    for o in 0..outer {
        for y in 0..h {
            let src = ((o * h + y) * w) * inner;
            let dst = ((o * ph + y) * pw) * inner;
            out.data_mut()[dst..dst + w * inner].copy_from_slice(&t.data()[src..src + w * inner]);
        }
    }
    Ok(out)
}

/// Inverse of [`pad_spatial`]: keeps the top-left `h x w` block.
pub fn crop_spatial<S: Scalar>(t: &Tensor<S>, h_axis: usize, h: usize, w: usize) -> Result<Tensor<S>> {
    let s = t.shape();
    if h_axis + 1 >= s.len() || s[h_axis] < h || s[h_axis + 1] < w {
        return Err(dim_err!("cannot crop {s:?} to {h}x{w} at axis {h_axis}"));
    }
    let (ph, pw) = (s[h_axis], s[h_axis + 1]);
    let outer: usize = s[..h_axis].iter().product();
    let inner: usize = s[h_axis + 2..].iter().product();
    let mut shape = s.to_vec();
    shape[h_axis] = h;
    shape[h_axis + 1] = w;
    let mut data = Vec::with_capacity(outer * h * w * inner);
    for o in 0..outer {
        for y in 0..h {
            let src = ((o * ph + y) * pw) * inner;
            data.extend_from_slice(&t.data()[src..src + w * inner]);
        }
    }
    Tensor::new(&shape, data)
}

/// One city's road data and its normalised movies.
#[derive(Clone, Debug)]
pub struct City<S> {
    pub name: String,
    /// Grid before padding.
    pub height: usize,
    pub width: usize,
    /// Padded `[0, 1]` road map.
    pub road: RoadMap<S>,
    pub prior: TopologyPrior<S>,
    /// Normalised, padded `(T, H, W, 8)` movies.
    pub movies: Vec<Tensor<S>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub city: usize,
    pub movie: usize,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    /// `(C, T_in, H, W)`
    pub x: Tensor<S>,
    /// `(T_out, C, H, W)`
    pub y: Tensor<S>,
    pub city: usize,
    pub window: WindowRef,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    /// `(B, C, T_in, H, W)`
    pub x: Tensor<S>,
    /// `(B, T_out, C, H, W)`
    pub y: Tensor<S>,
    pub city: usize,
    pub windows: Vec<WindowRef>,
    /// Position of this batch in the epoch plan.
    pub id: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub cities: Vec<City<S>>,
    pub index: Vec<WindowRef>,
    pub stats: NormStats,
    pub t_in: usize,
    pub t_out: usize,
}

/// Raw inputs for one city: road map and `(T, H, W, 8)` movies.
#[derive(Clone, Debug)]
pub struct RawCity<S> {
    pub name: String,
    pub road: Tensor<S>,
    pub movies: Vec<Tensor<S>>,
}

impl<S: Scalar> Dataset<S> {
    /// Normalises with `stats`, pads to multiples of 4 and indexes windows
    /// per movie in (city, movie, start) order.
    pub fn build(raw: &[RawCity<S>], stats: &NormStats, t_in: usize, t_out: usize, stride: usize, pool_k: usize) -> Result<Self> {
        let mut cities = Vec::with_capacity(raw.len());
        let mut index = Vec::new();
        for (ci, rc) in raw.iter().enumerate() {
            let road = normalize_road(&rc.road)?;
            let (h, w) = (road.height(), road.width());
            let road = RoadMap::new(pad_spatial(road.grid(), 1, 4)?)?;
            let prior = extract_prior(&road, pool_k)?;
            let mut movies = Vec::with_capacity(rc.movies.len());
            for (mi, m) in rc.movies.iter().enumerate() {
                let s = m.shape();
                if s.len() != 4 || s[3] != FRAME_CHANNELS || s[1] != h || s[2] != w {
                    return Err(dim_err!("{}: movie {mi} has shape {s:?}, expected (T, {h}, {w}, {FRAME_CHANNELS})", rc.name));
                }
                let starts = window_indices(s[0], t_in, t_out, stride);
                if starts.is_empty() {
                    log::warn!("{}: movie {mi} has {} frames, fewer than one window; skipped", rc.name, s[0]);
                }
                for start in starts {
                    index.push(WindowRef { city: ci, movie: mi, start });
                }
                movies.push(pad_spatial(&stats.apply(m, 3)?, 1, 4)?);
            }
            cities.push(City { name: rc.name.clone(), height: h, width: w, road, prior, movies });
        }
        Ok(Self { cities, index, stats: stats.clone(), t_in, t_out })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn sample(&self, i: usize) -> Result<Sample<S>> {
        let wref = *self.index.get(i).ok_or_else(|| Error::Validation(format!("sample {i} out of range")))?;
        let movie = &self.cities[wref.city].movies[wref.movie];
        let [_, h, w, c] = [movie.shape()[0], movie.shape()[1], movie.shape()[2], movie.shape()[3]];
        let plane = h * w;
        let frame = |t: usize| &movie.data()[t * plane * c..(t + 1) * plane * c];
        let mut x = vec![S::zero(); c * self.t_in * plane];
        for t in 0..self.t_in {
            for (p, px) in frame(wref.start + t).chunks_exact(c).enumerate() {
                for k in 0..c {
                    x[(k * self.t_in + t) * plane + p] = px[k];
                }
            }
        }
        let mut y = vec![S::zero(); self.t_out * c * plane];
        for t in 0..self.t_out {
            for (p, px) in frame(wref.start + self.t_in + t).chunks_exact(c).enumerate() {
                for k in 0..c {
                    y[(t * c + k) * plane + p] = px[k];
                }
            }
        }
        Ok(Sample {
            x: Tensor::new(&[c, self.t_in, h, w], x)?,
            y: Tensor::new(&[self.t_out, c, h, w], y)?,
            city: wref.city,
            window: wref,
        })
    }

    /// Groups sample indices into batches of at most `batch` that never mix
    /// cities. With `shuffle = Some(seed)` the order inside each city and the
    /// order of batches are permuted deterministically.
    pub fn plan(&self, batch: usize, shuffle: Option<u64>) -> Vec<Vec<usize>> {
        let batch = batch.max(1);
        let mut rng = shuffle.map(ChaCha8Rng::seed_from_u64);
        let mut out = Vec::new();
        for ci in 0..self.cities.len() {
            let mut ids: Vec<usize> = (0..self.index.len()).filter(|&i| self.index[i].city == ci).collect();
            if let Some(r) = rng.as_mut() {
                ids.shuffle(r);
            }
            out.extend(ids.chunks(batch).map(|c| c.to_vec()));
        }
        if let Some(r) = rng.as_mut() {
            out.shuffle(r);
        }
        out
    }

    pub fn batch(&self, ids: &[usize], id: usize) -> Result<Batch<S>> {
        if ids.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let samples = ids.iter().map(|&i| self.sample(i)).collect::<Result<Vec<_>>>()?;
        let city = samples[0].city;
        if samples.iter().any(|s| s.city != city) {
            return Err(Error::Validation("a batch cannot mix cities".into()));
        }
        let xs: Vec<Tensor<S>> = samples.iter().map(|s| s.x.clone()).collect();
        let ys: Vec<Tensor<S>> = samples.iter().map(|s| s.y.clone()).collect();
        Ok(Batch {
            x: Tensor::stack(&xs)?,
            y: Tensor::stack(&ys)?,
            city,
            windows: samples.iter().map(|s| s.window).collect(),
            id,
        })
    }
}

/// Worker count: `RCSNET_THREADS` if set and positive, else 1.
pub fn worker_count() -> usize {
    std::env::var("RCSNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Materialises batches on background threads and yields them in plan
/// order regardless of the number of workers.
pub struct Prefetcher<S> {
    rx: Receiver<(usize, Result<Batch<S>>)>,
    pending: BTreeMap<usize, Result<Batch<S>>>,
    next: usize,
    total: usize,
}

impl<S: Scalar> Prefetcher<S> {
    pub fn spawn(data: Arc<Dataset<S>>, plan: Vec<Vec<usize>>, workers: usize, depth: usize) -> Self {
        let total = plan.len();
        let (tx, rx) = sync_channel(depth.max(1));
        let plan = Arc::new(plan);
        let workers = workers.clamp(1, total.max(1));
        for w in 0..workers {
            let (tx, data, plan) = (tx.clone(), data.clone(), plan.clone());
            thread::spawn(move || {
                for i in (w..plan.len()).step_by(workers) {
                    if tx.send((i, data.batch(&plan[i], i))).is_err() {
                        return;
                    }
                }
            });
        }
        Self { rx, pending: BTreeMap::new(), next: 0, total }
    }
}

impl<S> Iterator for Prefetcher<S> {
    type Item = Result<Batch<S>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.total {
            return None;
        }
        loop {
            if let Some(b) = self.pending.remove(&self.next) {
                self.next += 1;
                return Some(b);
            }
            match self.rx.recv() {
                Ok((i, b)) => {
                    self.pending.insert(i, b);
                }
                Err(_) => {
                    self.next = self.total;
                    return Some(Err(Error::Validation("batch worker stopped early".into())));
                }
            }
        }
    }
}

/// Train / validation / test datasets sharing training-split statistics.
#[derive(Clone, Debug)]
pub struct Splits<S> {
    pub train: Dataset<S>,
    pub val: Dataset<S>,
    pub test: Dataset<S>,
    pub stats: NormStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub t_in: usize,
    pub t_out: usize,
    pub stride: usize,
    pub pool_k: usize,
}

/// Splits each city's movies into train / validation / test parts.
pub fn split_cities<S: Scalar>(cities: &[RawCity<S>], seed: u64) -> Result<[Vec<RawCity<S>>; 3]> {
    let mut parts: [Vec<RawCity<S>>; 3] = Default::default();
    for c in cities {
        let names: Vec<PathBuf> = (0..c.movies.len()).map(|i| PathBuf::from(format!("{i:06}"))).collect();
        let split = split_files(&names, seed)?;
        for (k, files) in [split.train, split.val, split.test].into_iter().enumerate() {
            let movies = files
                .iter()
                .map(|p| c.movies[p.to_string_lossy().parse::<usize>().unwrap()].clone())
                .collect();
            parts[k].push(RawCity { name: c.name.clone(), road: c.road.clone(), movies });
        }
    }
    Ok(parts)
}

/// Splits each city's movies, fits statistics on the training movies only
/// and builds the three datasets.
pub fn build_splits<S: Scalar>(cities: &[RawCity<S>], seed: u64, win: WindowSpec) -> Result<Splits<S>> {
    let [train, val, test] = split_cities(cities, seed)?;
    let stats = NormStats::fit(train.iter().flat_map(|c| c.movies.iter()))?;
    let make = |p: &[RawCity<S>]| Dataset::build(p, &stats, win.t_in, win.t_out, win.stride, win.pool_k);
    Ok(Splits { train: make(&train)?, val: make(&val)?, test: make(&test)?, stats })
}

/// Reads every city under `dir`.
pub fn load_dir<S: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<RawCity<S>>> {
    let mut out = Vec::new();
    for c in discover(dir)? {
        let (_, road) = container::read::<S>(&c.road)?;
        let movies = c
            .movies
            .iter()
            .map(|p| container::read::<S>(p).map(|(_, t)| t))
            .collect::<Result<Vec<_>>>()?;
        out.push(RawCity { name: c.name, road, movies });
    }
    Ok(out)
}

/// Writes one city in the directory layout described above.
pub fn write_city<S: Scalar>(dir: impl AsRef<Path>, city: &RawCity<S>) -> Result<()> {
    let root = dir.as_ref().join(&city.name);
    let road_h = container::Header::new(city.road.shape(), &["H", "W"]).with_channels(vec!["road".into()]);
    container::write(root.join(ROAD_FILE), &road_h, &city.road)?;
    for (i, m) in city.movies.iter().enumerate() {
        let h = container::Header::new(m.shape(), &["T", "H", "W", "C"]).with_channels(container::traffic_channel_names());
        container::write(root.join(MOVIE_DIR).join(format!("movie_{i:03}.gtc")), &h, m)?;
    }
    Ok(())
}
