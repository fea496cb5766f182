//! Trace sets: synthesis, balancing, scaling, shuffling, folds and file I/O.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PRESENT_SBOX: [u8; 16] = [0xC, 0x5, 0x6, 0xB, 0x9, 0x0, 0xA, 0xD, 0x3, 0xE, 0xF, 0x8, 0x4, 0x7, 0x1, 0x2];

#[rustfmt::skip]
pub const AES_SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

/// Key bytes attached to a trace set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyMaterial {
    Fixed(u8),
    PerTrace(Vec<u8>),
    Unknown,
}

impl KeyMaterial {
    pub fn for_trace(&self, i: usize) -> Option<u8> {
        match self {
            KeyMaterial::Fixed(k) => Some(*k),
            KeyMaterial::PerTrace(keys) => keys.get(i).copied(),
            KeyMaterial::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub m: usize,
    pub scaled: bool,
    pub source: String,
    pub seed: Option<u64>,
}

/// `n` traces of `f` samples each, stored row-major, with labels, plaintext
/// bytes and key material. `ids` identify rows through subsetting and
/// shuffling; they are assigned `0..n` on load.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub traces: Vec<f32>,
    pub n: usize,
    pub f: usize,
    pub labels: Vec<u8>,
    pub plaintexts: Vec<u8>,
    pub key: KeyMaterial,
    pub meta: TraceMeta,
    pub ids: Vec<u64>,
}

impl TraceSet {
    pub fn validate(&self) -> Result<()> {
        let m = self.meta.m;
        if !(2..=256).contains(&m) {
            return Err(Error::input(format!("class count {m} outside 2..=256")));
        }
        if self.traces.len() != self.n * self.f
            || self.labels.len() != self.n
            || self.plaintexts.len() != self.n
            || self.ids.len() != self.n
        {
            return Err(Error::size(format!("trace set arrays disagree with shape {}x{}", self.n, self.f)));
        }
        if let KeyMaterial::PerTrace(keys) = &self.key {
            if keys.len() != self.n {
                return Err(Error::size("per-trace key count differs from trace count"));
            }
        }
        if let Some(l) = self.labels.iter().find(|l| usize::from(**l) >= m) {
            return Err(Error::input(format!("label {l} not below class count {m}")));
        }
        if self.traces.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite trace sample"));
        }
        if self.meta.scaled && self.traces.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("scaled trace set has samples outside [0, 1]"));
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.traces[i * self.f..(i + 1) * self.f]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|v| f64::from(*v)).collect()
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row_f64(i)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.meta.m];
        for l in &self.labels {
            counts[usize::from(*l)] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> TraceSet {
        let mut traces = Vec::with_capacity(indices.len() * self.f);
        for &i in indices {
            traces.extend_from_slice(self.row(i));
        }
        TraceSet {
            traces,
            n: indices.len(),
            f: self.f,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            plaintexts: indices.iter().map(|&i| self.plaintexts[i]).collect(),
            key: match &self.key {
                KeyMaterial::PerTrace(keys) => KeyMaterial::PerTrace(indices.iter().map(|&i| keys[i]).collect()),
                other => other.clone(),
            },
            meta: self.meta.clone(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Row indices per class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.meta.m];
        for (i, l) in self.labels.iter().enumerate() {
            by_class[usize::from(*l)].push(i);
        }
        by_class
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub n_features: usize,
    pub informative: Vec<usize>,
    pub noise_sigma: f64,
    pub desync_window: usize,
    pub key: u8,
    /// Defaults to PRESENT for 16 classes and AES for 256.
    pub sbox: Option<Vec<u8>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 16,
            n_per_class: 150,
            n_features: 24,
            informative: (6..18).collect(),
            noise_sigma: (1.0f64 / 160.0).sqrt(),
            desync_window: 0,
            key: 0x2b,
            sbox: None,
        }
    }
}

impl SynthSpec {
    pub fn table(&self) -> Result<Vec<u8>> {
        match (&self.sbox, self.n_classes) {
            (Some(t), _) => Ok(t.clone()),
            (None, 16) => Ok(PRESENT_SBOX.to_vec()),
            (None, 256) => Ok(AES_SBOX.to_vec()),
            (None, m) => Err(Error::Config(format!("no default substitution table for {m} classes"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_classes;
        if !(2..=256).contains(&m) || 256 % m != 0 {
            return Err(Error::Config(format!("n_classes must divide 256, got {m}")));
        }
        let table = self.table()?;
        let mut seen = vec![false; m];
        if table.len() != m || table.iter().any(|v| usize::from(*v) >= m || std::mem::replace(&mut seen[usize::from(*v)], true)) {
            return Err(Error::Config(format!("substitution table must be a permutation of 0..{m}")));
        }
        if self.informative.iter().any(|i| *i >= self.n_features) {
            return Err(Error::Config("informative index beyond n_features".into()));
        }
        if self.desync_window * 2 >= self.n_features {
            return Err(Error::Config("desync_window must be below n_features / 2".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Class of plaintext `p` under key `k`: `table[(p ^ k) mod m]`.
    pub fn class_of(table: &[u8], p: u8, k: u8) -> u8 {
        table[usize::from(p ^ k) % table.len()]
    }
}

pub fn hamming_weight(x: u8) -> u32 {
    x.count_ones()
}

fn render_trace(spec: &SynthSpec, label: u8, noise: &Normal<f64>, rng: &mut Rng, out: &mut Vec<f32>) {
    let hw_max = f64::from((spec.n_classes - 1).count_ones());
    let signal = f64::from(hamming_weight(label)) / hw_max;
    let mut row: Vec<f64> = (0..spec.n_features).map(|_| noise.sample(rng)).collect();
    for &i in &spec.informative {
        row[i] += signal;
    }
    if spec.desync_window > 0 {
        let shift = rng.random_range(0..=spec.desync_window);
        row.rotate_right(shift);
    }
    out.extend(row.iter().map(|v| *v as f32));
}

fn synth_from_plaintexts(spec: &SynthSpec, plaintexts: Vec<u8>, seed: u64, rng: &mut Rng) -> Result<TraceSet> {
    spec.validate()?;
    let table = spec.table()?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n = plaintexts.len();
    let labels: Vec<u8> = plaintexts.iter().map(|p| SynthSpec::class_of(&table, *p, spec.key)).collect();
    let mut traces = Vec::with_capacity(n * spec.n_features);
    for &label in &labels {
        render_trace(spec, label, &noise, rng, &mut traces);
    }
    let set = TraceSet {
        traces,
        n,
        f: spec.n_features,
        labels,
        plaintexts,
        key: KeyMaterial::Fixed(spec.key),
        meta: TraceMeta { m: spec.n_classes, scaled: false, source: "synthetic".into(), seed: Some(seed) },
        ids: (0..n as u64).collect(),
    };
    set.validate()?;
    Ok(set)
}

/// `n_total` traces with uniformly drawn plaintexts. `seed` is recorded in
/// the metadata only.
pub fn synth_traces(spec: &SynthSpec, n_total: usize, seed: u64, rng: &mut Rng) -> Result<TraceSet> {
    let plaintexts: Vec<u8> = (0..n_total).map(|_| rng.random()).collect();
    synth_from_plaintexts(spec, plaintexts, seed, rng)
}

/// Exactly `n_per_class` traces of every class, in shuffled order. Each
/// plaintext is drawn uniformly among those mapping to its class.
pub fn synth_balanced(spec: &SynthSpec, seed: u64, rng: &mut Rng) -> Result<TraceSet> {
    spec.validate()?;
    let table = spec.table()?;
    let mut preimages = vec![Vec::new(); spec.n_classes];
    for p in 0..=255u8 {
        preimages[usize::from(SynthSpec::class_of(&table, p, spec.key))].push(p);
    }
    let mut plaintexts = Vec::with_capacity(spec.n_classes * spec.n_per_class);
    for pre in &preimages {
        for _ in 0..spec.n_per_class {
            plaintexts.push(pre[rng.random_range(0..pre.len())]);
        }
    }
    plaintexts.shuffle(rng);
    synth_from_plaintexts(spec, plaintexts, seed, rng)
}

/// Keeps the first `min(smallest class count, cap)` rows of every class,
/// preserving row order.
pub fn undersample_balance(set: &TraceSet, per_class_cap: Option<usize>) -> Result<TraceSet> {
    let counts = set.class_counts();
    if let Some(c) = counts.iter().position(|c| *c == 0) {
        return Err(Error::input(format!("class {c} has no traces")));
    }
    let keep = counts.iter().copied().min().unwrap_or(0).min(per_class_cap.unwrap_or(usize::MAX));
    let mut taken = vec![0usize; set.meta.m];
    let indices: Vec<usize> = (0..set.n)
        .filter(|&i| {
            let c = usize::from(set.labels[i]);
            taken[c] += 1;
            taken[c] <= keep
        })
        .collect();
    Ok(set.subset(&indices))
}

/// Per-feature min/max from a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl FeatureScaler {
    pub fn fit(set: &TraceSet) -> Result<FeatureScaler> {
        if set.n == 0 {
            return Err(Error::input("cannot fit a scaler on an empty set"));
        }
        let mut min = set.row(0).to_vec();
        let mut max = min.clone();
        for i in 1..set.n {
            for (j, v) in set.row(i).iter().enumerate() {
                min[j] = min[j].min(*v);
                max[j] = max[j].max(*v);
            }
        }
        Ok(FeatureScaler { min, max })
    }

    /// Maps each feature to `[0, 1]`; constant features map to 0. Values
    /// outside the fitted range are clamped, and the number clamped is
    /// returned.
    pub fn apply(&self, set: &TraceSet) -> Result<(TraceSet, usize)> {
        if set.f != self.min.len() {
            return Err(Error::size(format!("scaler fitted on {} features, set has {}", self.min.len(), set.f)));
        }
        let mut out = set.clone();
        let mut clamped = 0;
        for (k, v) in out.traces.iter_mut().enumerate() {
            *v = self.scale_value(k % set.f, *v, &mut clamped);
        }
        out.meta.scaled = true;
        Ok((out, clamped))
    }

    pub fn scale_row(&self, row: &[f64]) -> Vec<f64> {
        let mut clamped = 0;
        row.iter()
            .enumerate()
            .map(|(j, v)| f64::from(self.scale_value(j, *v as f32, &mut clamped)))
            .collect()
    }

    fn scale_value(&self, j: usize, v: f32, clamped: &mut usize) -> f32 {
        let (lo, hi) = (f64::from(self.min[j]), f64::from(self.max[j]));
        if hi <= lo {
            return 0.0;
        }
        let s = (f64::from(v) - lo) / (hi - lo);
        if !(0.0..=1.0).contains(&s) {
            *clamped += 1;
        }
        s.clamp(0.0, 1.0) as f32
    }
}

/// Fits a scaler on `set` and applies it.
pub fn scale_features(set: &TraceSet) -> Result<(TraceSet, FeatureScaler)> {
    let scaler = FeatureScaler::fit(set)?;
    let (scaled, _) = scaler.apply(set)?;
    Ok((scaled, scaler))
}

/// Row permutation; `perm[i]` is the original index of output row `i`.
pub fn shuffle(set: &TraceSet, rng: &mut Rng) -> (TraceSet, Vec<usize>) {
    let mut perm: Vec<usize> = (0..set.n).collect();
    perm.shuffle(rng);
    (set.subset(&perm), perm)
}

/// `k` disjoint, exhaustive, class-stratified folds of row indices. Each
/// class is shuffled and dealt round robin, continuing from where the
/// previous class stopped so fold sizes differ by at most one.
pub fn kfold_split(set: &TraceSet, k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::input("k-fold split needs k >= 2"));
    }
    let by_class = set.indices_by_class();
    if let Some((c, idx)) = by_class.iter().enumerate().find(|(_, v)| !v.is_empty() && v.len() < k) {
        return Err(Error::input(format!("class {c} has {} traces, fewer than k = {k}", idx.len())));
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for mut idx in by_class {
        idx.shuffle(rng);
        for i in idx {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}

const MAGIC: &[u8; 8] = b"INFTRACE";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    Native,
    Csv,
}

impl TraceFormat {
    /// `.csv` files are CSV, everything else native.
    pub fn from_path(path: &Path) -> TraceFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => TraceFormat::Csv,
            _ => TraceFormat::Native,
        }
    }
}

/// Native little-endian layout:
///
/// ```text
/// magic "INFTRACE" | version u32 | n u64 | f u64 | m u32 | scaled u8
/// | key kind u8 (0 unknown, 1 fixed, 2 per trace) | has seed u8 | seed u64
/// | source length u32 | source utf-8
/// | labels [u8; n] | plaintexts [u8; n] | key bytes [u8; 0, 1 or n]
/// | traces [f32; n·f] row-major
/// ```
pub fn encode_native(set: &TraceSet) -> Result<Vec<u8>> {
    set.validate()?;
    let mut out = Vec::with_capacity(64 + set.n * (3 + 4 * set.f));
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u64::<LittleEndian>(set.n as u64)?;
    out.write_u64::<LittleEndian>(set.f as u64)?;
    out.write_u32::<LittleEndian>(set.meta.m as u32)?;
    out.write_u8(u8::from(set.meta.scaled))?;
    out.write_u8(match set.key {
        KeyMaterial::Unknown => 0,
        KeyMaterial::Fixed(_) => 1,
        KeyMaterial::PerTrace(_) => 2,
    })?;
    out.write_u8(u8::from(set.meta.seed.is_some()))?;
    out.write_u64::<LittleEndian>(set.meta.seed.unwrap_or(0))?;
    out.write_u32::<LittleEndian>(set.meta.source.len() as u32)?;
    out.write_all(set.meta.source.as_bytes())?;
    out.write_all(&set.labels)?;
    out.write_all(&set.plaintexts)?;
    match &set.key {
        KeyMaterial::Unknown => {}
        KeyMaterial::Fixed(k) => out.write_u8(*k)?,
        KeyMaterial::PerTrace(keys) => out.write_all(keys)?,
    }
    for v in &set.traces {
        out.write_f32::<LittleEndian>(*v)?;
    }
    Ok(out)
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.cur.position(), message: message.into() }
    }

    fn remaining(&self) -> u64 {
        self.cur.get_ref().len() as u64 - self.cur.position()
    }

    fn need(&self, bytes: u64, what: &str) -> Result<()> {
        if self.remaining() < bytes {
            return Err(self.fail(format!("truncated {what}: need {bytes} bytes, {} left", self.remaining())));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        self.need(1, what)?;
        Ok(self.cur.read_u8()?)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.need(4, what)?;
        Ok(self.cur.read_u32::<LittleEndian>()?)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.need(8, what)?;
        Ok(self.cur.read_u64::<LittleEndian>()?)
    }

    fn bytes(&mut self, len: u64, what: &str) -> Result<Vec<u8>> {
        self.need(len, what)?;
        let mut buf = vec![0; len as usize];
        self.cur.read_exact(&mut buf)?;
        Ok(buf)
    }
}

pub fn decode_native(bytes: &[u8]) -> Result<TraceSet> {
    let mut r = Reader { cur: Cursor::new(bytes) };
    if r.bytes(8, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic".into() });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format { offset: 8, message: format!("unsupported version {version}") });
    }
    let n = r.u64("trace count")?;
    let f = r.u64("feature count")?;
    let m = r.u32("class count")? as usize;
    let scaled = match r.u8("scaled flag")? {
        0 => false,
        1 => true,
        other => return Err(r.fail(format!("invalid scaled flag {other}"))),
    };
    let key_kind = r.u8("key kind")?;
    let has_seed = r.u8("seed flag")?;
    let seed = r.u64("seed")?;
    let source_len = r.u32("source length")?;
    let source = String::from_utf8(r.bytes(u64::from(source_len), "source")?)
        .map_err(|_| r.fail("source tag is not utf-8"))?;

    let body = n
        .checked_mul(f)
        .and_then(|nf| nf.checked_mul(4))
        .and_then(|t| t.checked_add(n.checked_mul(2)?))
        .ok_or_else(|| r.fail("shape overflows"))?;
    r.need(body, "trace body")?;
    let labels = r.bytes(n, "labels")?;
    let plaintexts = r.bytes(n, "plaintexts")?;
    let key = match key_kind {
        0 => KeyMaterial::Unknown,
        1 => KeyMaterial::Fixed(r.u8("key byte")?),
        2 => KeyMaterial::PerTrace(r.bytes(n, "key bytes")?),
        other => return Err(r.fail(format!("invalid key kind {other}"))),
    };
    let mut traces = Vec::with_capacity((n * f) as usize);
    r.need(n * f * 4, "traces")?;
    for _ in 0..n * f {
        traces.push(r.cur.read_f32::<LittleEndian>()?);
    }
    if r.remaining() != 0 {
        return Err(r.fail(format!("{} trailing bytes", r.remaining())));
    }
    let set = TraceSet {
        traces,
        n: n as usize,
        f: f as usize,
        labels,
        plaintexts,
        key,
        meta: TraceMeta { m, scaled, source, seed: (has_seed == 1).then_some(seed) },
        ids: (0..n).collect(),
    };
    set.validate().map_err(|e| Error::Format { offset: 0, message: e.to_string() })?;
    Ok(set)
}

/// Header `label,plaintext,f0,…`; key material is not stored.
pub fn encode_csv(set: &TraceSet) -> String {
    let mut out = String::from("label,plaintext");
    for j in 0..set.f {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..set.n {
        out.push_str(&format!("{},{}", set.labels[i], set.plaintexts[i]));
        for v in set.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Parses CSV traces. The class count is `m` if given, else the largest
/// label plus one (at least 2).
pub fn decode_csv(text: &str, m: Option<usize>) -> Result<TraceSet> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or(Error::Format { offset: 0, message: "empty file".into() })?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 2 || cols[0] != "label" || cols[1] != "plaintext" {
        return Err(Error::Format { offset: 0, message: "header must start with label,plaintext".into() });
    }
    let f = cols.len() - 2;
    if cols[2..].iter().enumerate().any(|(j, c)| *c != format!("f{j}")) {
        return Err(Error::Format { offset: 0, message: "feature columns must be f0..".into() });
    }
    offset += header.len() as u64;

    let (mut labels, mut plaintexts, mut traces) = (Vec::new(), Vec::new(), Vec::new());
    for line in lines {
        let start = offset;
        offset += line.len() as u64;
        let body = line.trim_end();
        if body.is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Format { offset: start, message: msg };
        let fields: Vec<&str> = body.split(',').collect();
        if fields.len() != f + 2 {
            return Err(fail(format!("expected {} fields, found {}", f + 2, fields.len())));
        }
        labels.push(fields[0].parse::<u8>().map_err(|e| fail(format!("label: {e}")))?);
        plaintexts.push(fields[1].parse::<u8>().map_err(|e| fail(format!("plaintext: {e}")))?);
        for v in &fields[2..] {
            traces.push(v.parse::<f32>().map_err(|e| fail(format!("sample {v:?}: {e}")))?);
        }
    }
    let n = labels.len();
    let m = m.unwrap_or_else(|| labels.iter().map(|l| usize::from(*l) + 1).max().unwrap_or(2).max(2));
    let set = TraceSet {
        traces,
        n,
        f,
        labels,
        plaintexts,
        key: KeyMaterial::Unknown,
        meta: TraceMeta { m, scaled: false, source: "csv".into(), seed: None },
        ids: (0..n as u64).collect(),
    };
    set.validate().map_err(|e| Error::Format { offset: 0, message: e.to_string() })?;
    Ok(set)
}

pub fn save_traceset(set: &TraceSet, path: &Path, format: TraceFormat) -> Result<()> {
    let bytes = match format {
        TraceFormat::Native => encode_native(set)?,
        TraceFormat::Csv => encode_csv(set).into_bytes(),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_traceset(path: &Path, format: TraceFormat) -> Result<TraceSet> {
    let bytes = std::fs::read(path)?;
    match format {
        TraceFormat::Native => decode_native(&bytes),
        TraceFormat::Csv => {
            let text = String::from_utf8(bytes).map_err(|e| Error::Format {
                offset: e.utf8_error().valid_up_to() as u64,
                message: "invalid utf-8".into(),
            })?;
            decode_csv(&text, None)
        }
    }
}

/// Label histogram keyed by class.
pub fn label_histogram(set: &TraceSet) -> BTreeMap<u8, usize> {
    let mut h = BTreeMap::new();
    for l in &set.labels {
        *h.entry(*l).or_insert(0) += 1;
    }
    h
}
