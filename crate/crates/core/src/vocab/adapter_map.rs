use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use super::{build_vocab_tensors, collect_bucket_words, gaussian, stream_rng, Embedder};
use crate::error::{FuseError, Result};
use crate::tproduct::io::{read_f64, read_u32, read_u64};
use crate::tproduct::{
    tpinv_report, tprod_general, ttranspose, Tensor3, Tensor3F, DEFAULT_RANK_TOL,
};

pub const ADAPTER_MAGIC: &[u8; 8] = b"FUSEADPT";
pub const ADAPTER_VERSION: u32 = 1;

/// Stream reserved for the long-word fallback; buckets use streams `1..=l_max`.
const LONG_WORD_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub l_max: usize,
    pub sample_cap: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            l_max: super::DEFAULT_L_MAX,
            sample_cap: super::DEFAULT_SAMPLE_CAP,
            seed: 0,
        }
    }
}

/// Precomputed `Ṽᵢ⁺ * Ṽⱼ` per model-j token length, pulling model-j word
/// gradients back into model i.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterMap {
    pub source_id: String,
    pub target_id: String,
    pub d_i: usize,
    pub d_j: usize,
    /// `maps[l - 1]` serves words of `l` model-j tokens; each is `d_i × d_j × tubes`.
    pub maps: Vec<Tensor3>,
    /// Words sampled into each bucket; zero marks a random fallback map.
    pub bucket_words: Vec<usize>,
    pub fallback_seed: u64,
    pub fallback_scale: f64,
    long_word: Tensor3,
    /// Per bucket, the spectra of the padded map and of its t-transpose.
    spectra: Vec<(Tensor3F, Tensor3F)>,
}

fn random_map(d_i: usize, d_j: usize, tubes: usize, seed: u64, stream: u64, scale: f64) -> Tensor3 {
    let mut rng = stream_rng(seed, stream);
    let mut draw = gaussian(&mut rng, scale);
    let mut t = Tensor3::zeros(d_i, d_j, tubes);
    for n in 0..tubes {
        for r in 0..d_i {
            for c in 0..d_j {
                t.set(r, c, n, draw());
            }
        }
    }
    t
}

impl AdapterMap {
    pub fn new(
        source_id: impl Into<String>,
        target_id: impl Into<String>,
        maps: Vec<Tensor3>,
        bucket_words: Vec<usize>,
        fallback_seed: u64,
        fallback_scale: f64,
    ) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| FuseError::InvalidArgument("an adapter needs l_max ≥ 1 maps".into()))?;
        let (d_i, d_j) = (first.rows(), first.cols());
        if let Some((l, m)) = maps
            .iter()
            .enumerate()
            .find(|(_, m)| m.rows() != d_i || m.cols() != d_j)
        {
            return Err(FuseError::dim(format!(
                "map {} is {}×{}, expected {d_i}×{d_j}",
                l + 1,
                m.rows(),
                m.cols()
            )));
        }
        if bucket_words.len() != maps.len() {
            return Err(FuseError::dim(format!(
                "{} bucket sizes for {} maps",
                bucket_words.len(),
                maps.len()
            )));
        }
        if !(fallback_scale.is_finite() && fallback_scale >= 0.0) {
            return Err(FuseError::InvalidArgument(format!(
                "fallback scale {fallback_scale} must be finite and non-negative"
            )));
        }
        let long_word = random_map(d_i, d_j, 1, fallback_seed, LONG_WORD_STREAM, fallback_scale);
        let spectra = maps
            .iter()
            .enumerate()
            .map(|(n, m)| {
                let padded = m.resize_tubes(m.tubes().max(n + 1));
                (
                    Tensor3F::forward(&padded),
                    Tensor3F::forward(&ttranspose(&padded)),
                )
            })
            .collect();
        Ok(AdapterMap {
            source_id: source_id.into(),
            target_id: target_id.into(),
            d_i,
            d_j,
            maps,
            bucket_words,
            fallback_seed,
            fallback_scale,
            long_word,
            spectra,
        })
    }

    pub fn l_max(&self) -> usize {
        self.maps.len()
    }

    /// The map for a word of `l` model-j tokens; words longer than `l_max`
    /// share a seeded random single-tube map.
    pub fn map_for(&self, l: usize) -> &Tensor3 {
        match l {
            1.. if l <= self.l_max() => &self.maps[l - 1],
            _ => &self.long_word,
        }
    }

    /// Tube count of the word-wise product for words of `l` model-j tokens:
    /// the longer of the map and the word.
    pub fn product_tubes(&self, l: usize) -> usize {
        self.map_for(l).tubes().max(l)
    }

    /// `x * T`, or `x * Tᵀ` with `transpose`, where `T` is the map for words
    /// of `l` model-j tokens zero-padded to [`Self::product_tubes`] tubes and
    /// `x` is padded or cut to the same length.
    pub fn word_product(&self, x: &Tensor3, l: usize, transpose: bool) -> Result<Tensor3> {
        let x = x.resize_tubes(self.product_tubes(l));
        match l.checked_sub(1).and_then(|b| self.spectra.get(b)) {
            Some((map, map_t)) => Tensor3F::forward(&x)
                .mul(if transpose { map_t } else { map })?
                .inverse(),
            None => {
                // A zero-padded single-tube map acts on each tube separately.
                let m = self.long_word.slice(0);
                let m = if transpose { m.transpose() } else { m };
                let slices: Vec<_> = x.slices().iter().map(|s| s * &m).collect();
                Tensor3::from_slices(&slices)
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(ADAPTER_MAGIC)?;
        w.write_all(&ADAPTER_VERSION.to_le_bytes())?;
        for id in [&self.source_id, &self.target_id] {
            w.write_all(&(id.len() as u64).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        for n in [self.d_i, self.d_j, self.l_max()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        w.write_all(&self.fallback_seed.to_le_bytes())?;
        w.write_all(&self.fallback_scale.to_le_bytes())?;
        for (map, &count) in self.maps.iter().zip(&self.bucket_words) {
            w.write_all(&(count as u64).to_le_bytes())?;
            map.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |detail: String| FuseError::format("adapter", detail);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ADAPTER_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != ADAPTER_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut ids = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = read_u64(r)?;
            if len > 1 << 16 {
                return Err(bad(format!("implausible model id length {len}")));
            }
            let mut buf = vec![0u8; len as usize];
            r.read_exact(&mut buf)?;
            ids.push(String::from_utf8(buf).map_err(|e| bad(format!("model id: {e}")))?);
        }
        let d_i = read_u64(r)? as usize;
        let d_j = read_u64(r)? as usize;
        let l_max = read_u64(r)?;
        if l_max == 0 || l_max > 1 << 16 {
            return Err(bad(format!("implausible l_max {l_max}")));
        }
        let fallback_seed = read_u64(r)?;
        let fallback_scale = read_f64(r)?;
        let mut maps = Vec::with_capacity(l_max as usize);
        let mut bucket_words = Vec::with_capacity(l_max as usize);
        for _ in 0..l_max {
            bucket_words.push(read_u64(r)? as usize);
            maps.push(Tensor3::read_from(r)?);
        }
        let [source_id, target_id]: [String; 2] = ids.try_into().expect("two ids read");
        let amap = AdapterMap::new(
            source_id,
            target_id,
            maps,
            bucket_words,
            fallback_seed,
            fallback_scale,
        )?;
        if (amap.d_i, amap.d_j) != (d_i, d_j) {
            return Err(bad(format!(
                "header says {d_i}×{d_j} but maps are {}×{}",
                amap.d_i, amap.d_j
            )));
        }
        Ok(amap)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let amap = AdapterMap::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(FuseError::format(
                "adapter",
                format!("{} trailing bytes", cursor.len()),
            ));
        }
        Ok(amap)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        AdapterMap::from_bytes(&std::fs::read(path)?)
    }
}

/// Fits one map per bucket `l = 1..=l_max`. Buckets are independent and run
/// in parallel; each draws from its own seed stream so the result does not
/// depend on scheduling.
pub fn fit_adapter(
    corpus: &str,
    model_i: &Embedder,
    model_j: &Embedder,
    cfg: &FitConfig,
) -> Result<AdapterMap> {
    if cfg.l_max == 0 {
        return Err(FuseError::InvalidArgument("l_max must be ≥ 1".into()));
    }
    let (d_i, d_j) = (model_i.dim(), model_j.dim());
    let scale = 1.0 / ((d_i * d_j) as f64).sqrt();
    let fitted: Vec<(Tensor3, usize)> = (1..=cfg.l_max)
        .into_par_iter()
        .map(|l| {
            let stream = l as u64;
            let sample_seed: u64 = stream_rng(cfg.seed, stream).random();
            let bucket =
                collect_bucket_words(corpus, model_i, model_j, l, cfg.sample_cap, sample_seed)?;
            if bucket.words.is_empty() {
                log::warn!("bucket l={l} has no words; using a random map");
                return Ok((random_map(d_i, d_j, l, cfg.seed, stream, scale), 0));
            }
            let tensors = build_vocab_tensors(&bucket.words, model_i, model_j, l)?;
            let (pinv, report) = tpinv_report(&tensors.v_i, DEFAULT_RANK_TOL);
            if report.is_rank_deficient() {
                log::info!(
                    "bucket l={l}: {} words, ranks per frequency {:?}",
                    bucket.words.len(),
                    report.ranks
                );
            }
            Ok((tprod_general(&pinv, &tensors.v_j)?, bucket.words.len()))
        })
        .collect::<Result<_>>()?;
    let (maps, counts) = fitted.into_iter().unzip();
    AdapterMap::new(
        model_i.vocab.model_id.clone(),
        model_j.vocab.model_id.clone(),
        maps,
        counts,
        cfg.seed,
        scale,
    )
}
