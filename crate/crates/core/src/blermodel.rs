//! MCS table and sigmoid BLER curves.
//!
//! The BLER of MCS `u` at SINR `gamma` (dB) for a code block of `b` bits is
//! approximated by a shifted and scaled logistic:
//!
//! ```text
//! BLER(u, gamma, b) = 1 - 1 / (1 + exp(-(gamma - c(u, b)) / s(u, b)))
//! ```
//!
//! Centers and scales are stored per `(mcs, cbs)`; a TBS is resolved to the
//! nearest stored CBS.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MCS index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mcs(pub u8);

impl fmt::Display for Mcs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McsEntry {
    pub index: Mcs,
    /// Spectral efficiency in bits per symbol.
    pub se: f64,
}

/// Ordered set of available MCS indices with their spectral efficiencies.
#[derive(Debug, Clone, PartialEq)]
pub struct McsTable {
    entries: Vec<McsEntry>,
}

/// PDSCH MCS index table 2 (256QAM): modulation order and target code rate x 1024.
#[rustfmt::skip]
const NR_MCS_TABLE_2: [(u8, f64); 28] = [
    (2, 120.0), (2, 193.0), (2, 308.0), (2, 449.0), (2, 602.0),
    (4, 378.0), (4, 434.0), (4, 490.0), (4, 553.0), (4, 616.0), (4, 658.0),
    (6, 466.0), (6, 517.0), (6, 567.0), (6, 616.0), (6, 666.0), (6, 719.0),
    (6, 772.0), (6, 822.0), (6, 873.0),
    (8, 682.5), (8, 711.0), (8, 754.0), (8, 797.0), (8, 841.0), (8, 885.0),
    (8, 916.5), (8, 948.0),
];

impl McsTable {
    pub fn new(entries: Vec<McsEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidTable("empty MCS table".into()));
        }
        for e in &entries {
            if !(e.se > 0.0 && e.se.is_finite()) {
                return Err(Error::InvalidTable(format!("MCS {} has non-positive SE", e.index)));
            }
        }
        for w in entries.windows(2) {
            if w[1].index <= w[0].index {
                return Err(Error::InvalidTable("MCS indices must be strictly increasing".into()));
            }
            if w[1].se <= w[0].se {
                return Err(Error::InvalidTable(format!(
                    "SE must increase with index (MCS {} -> {})",
                    w[0].index, w[1].index
                )));
            }
        }
        Ok(McsTable { entries })
    }

    /// The 28-entry 256QAM PDSCH table (indices 0..=27).
    pub fn nr_table2() -> Self {
        let entries = NR_MCS_TABLE_2
            .iter()
            .enumerate()
            .map(|(i, &(qm, rate))| McsEntry { index: Mcs(i as u8), se: f64::from(qm) * rate / 1024.0 })
            .collect();
        McsTable { entries }
    }

    /// Restricts the table to the given indices.
    pub fn subset(&self, indices: &[Mcs]) -> Result<Self> {
        let mut entries = Vec::with_capacity(indices.len());
        for &u in indices {
            entries.push(*self.entry(u)?);
        }
        entries.sort_by_key(|e| e.index);
        entries.dedup_by_key(|e| e.index);
        McsTable::new(entries)
    }

    pub fn entry(&self, u: Mcs) -> Result<&McsEntry> {
        self.entries
            .binary_search_by_key(&u, |e| e.index)
            .map(|i| &self.entries[i])
            .map_err(|_| Error::UnknownMcs(u))
    }

    pub fn se(&self, u: Mcs) -> Result<f64> {
        self.entry(u).map(|e| e.se)
    }

    pub fn entries(&self) -> &[McsEntry] {
        &self.entries
    }

    pub fn indices(&self) -> impl DoubleEndedIterator<Item = Mcs> + '_ {
        self.entries.iter().map(|e| e.index)
    }

    pub fn lowest(&self) -> Mcs {
        self.entries[0].index
    }

    pub fn highest(&self) -> Mcs {
        self.entries[self.entries.len() - 1].index
    }

    pub fn min_se(&self) -> f64 {
        self.entries[0].se
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Sigmoid parameters of the BLER curve for one `(mcs, cbs)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidBlerEntry {
    pub mcs: Mcs,
    pub cbs: u32,
    pub center: f64,
    pub scale: f64,
}

impl SigmoidBlerEntry {
    pub fn bler(&self, gamma_db: f64) -> f64 {
        sigmoid_bler(gamma_db, self.center, self.scale)
    }
}

/// `1 - sigma((gamma - center) / scale)`, evaluated as `sigma(-(gamma - center) / scale)`.
pub fn sigmoid_bler(gamma_db: f64, center: f64, scale: f64) -> f64 {
    let z = (gamma_db - center) / scale;
    1.0 / (1.0 + z.exp())
}

/// Clipping intervals applied to the BLER and scale terms of the SALAD update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub bler: (f64, f64),
    pub scale: (f64, f64),
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { bler: (0.01, 0.99), scale: (0.5, 10.0) }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        let (bl, bh) = self.bler;
        let (sl, sh) = self.scale;
        if !(0.0 < bl && bl <= bh && bh < 1.0) {
            return Err(Error::InvalidTable(format!("BLER clip interval ({bl}, {bh}) not nested in (0, 1)")));
        }
        if !(0.0 < sl && sl <= sh && sh.is_finite()) {
            return Err(Error::InvalidTable(format!("scale clip interval ({sl}, {sh}) not nested in (0, inf)")));
        }
        Ok(())
    }

    pub fn clip_bler(&self, p: f64) -> f64 {
        p.clamp(self.bler.0, self.bler.1)
    }

    pub fn clip_scale(&self, s: f64) -> f64 {
        s.clamp(self.scale.0, self.scale.1)
    }

    pub fn clip_bler_scale(&self, p: f64, s: f64) -> (f64, f64) {
        (self.clip_bler(p), self.clip_scale(s))
    }
}

/// Per-`(mcs, cbs)` sigmoid BLER table over an [`McsTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlerTable {
    mcs: McsTable,
    // per MCS, sorted by cbs
    entries: BTreeMap<Mcs, Vec<SigmoidBlerEntry>>,
    clip: ClipConfig,
}

/// Published anchor rows `(mcs, cbs, center, scale)`.
#[rustfmt::skip]
pub const ANCHOR_ROWS: [(u8, u32, f64, f64); 10] = [
    (2, 100, -1.91, 0.44), (2, 2000, -2.01, 0.36),
    (6, 100, 4.84, 0.51), (6, 2000, 5.04, 0.20),
    (10, 100, 8.36, 0.52), (10, 2000, 9.04, 0.04),
    (14, 100, 12.20, 0.57), (14, 2000, 12.32, 0.38),
    (20, 100, 18.10, 0.69), (20, 2000, 18.54, 0.06),
];

impl BlerTable {
    pub fn new(mcs: McsTable, entries: Vec<SigmoidBlerEntry>, clip: ClipConfig) -> Result<Self> {
        clip.validate()?;
        let mut map: BTreeMap<Mcs, Vec<SigmoidBlerEntry>> = BTreeMap::new();
        for e in entries {
            mcs.entry(e.mcs)?;
            if !(e.scale > 0.0 && e.scale.is_finite()) {
                return Err(Error::InvalidTable(format!("MCS {} CBS {}: scale must be > 0", e.mcs, e.cbs)));
            }
            if !e.center.is_finite() {
                return Err(Error::InvalidTable(format!("MCS {} CBS {}: non-finite center", e.mcs, e.cbs)));
            }
            if e.cbs == 0 {
                return Err(Error::InvalidTable(format!("MCS {}: CBS must be positive", e.mcs)));
            }
            map.entry(e.mcs).or_default().push(e);
        }
        for u in mcs.indices() {
            let rows = map
                .get_mut(&u)
                .ok_or_else(|| Error::InvalidTable(format!("no BLER entry for MCS {u}")))?;
            rows.sort_by_key(|e| e.cbs);
            if rows.windows(2).any(|w| w[0].cbs == w[1].cbs) {
                return Err(Error::InvalidTable(format!("duplicate CBS for MCS {u}")));
            }
        }
        // centers non-decreasing in MCS for every CBS present at both indices
        let mut last: BTreeMap<u32, (Mcs, f64)> = BTreeMap::new();
        for rows in map.values() {
            for e in rows {
                if let Some(&(prev_u, prev_c)) = last.get(&e.cbs) {
                    if e.center < prev_c {
                        return Err(Error::InvalidTable(format!(
                            "CBS {}: center decreases from MCS {} ({}) to MCS {} ({})",
                            e.cbs, prev_u, prev_c, e.mcs, e.center
                        )));
                    }
                }
                last.insert(e.cbs, (e.mcs, e.center));
            }
        }
        Ok(BlerTable { mcs, entries: map, clip })
    }

    /// Only the ten published anchor rows, over MCS {2, 6, 10, 14, 20}.
    pub fn anchors() -> Self {
        let indices: Vec<Mcs> = [2u8, 6, 10, 14, 20].into_iter().map(Mcs).collect();
        let mcs = McsTable::nr_table2().subset(&indices).expect("anchor indices are in table 2");
        let entries = ANCHOR_ROWS
            .iter()
            .map(|&(u, cbs, center, scale)| SigmoidBlerEntry { mcs: Mcs(u), cbs, center, scale })
            .collect();
        BlerTable::new(mcs, entries, ClipConfig::default()).expect("anchor rows are valid")
    }

    /// Full 28-MCS table for CBS 100 and 2000.
    ///
    /// Rows at MCS 2, 6, 10, 14 and 20 are the published anchors. All other
    /// rows are SYNTHETIC: centers are interpolated linearly in SE between
    /// anchors (extrapolated with the end-segment slope), scales are
    /// interpolated linearly in SE and held constant beyond the end anchors.
    pub fn bundled() -> Self {
        let mcs = McsTable::nr_table2();
        let mut entries = Vec::new();
        for cbs in [100u32, 2000] {
            let anchors: Vec<(f64, f64, f64)> = ANCHOR_ROWS
                .iter()
                .filter(|r| r.1 == cbs)
                .map(|&(u, _, c, s)| (mcs.se(Mcs(u)).unwrap(), c, s))
                .collect();
            for e in mcs.entries() {
                let (center, scale) = interpolate_anchor(&anchors, e.se);
                entries.push(SigmoidBlerEntry { mcs: e.index, cbs, center, scale });
            }
        }
        BlerTable::new(mcs, entries, ClipConfig::default()).expect("bundled table is valid")
    }

    pub fn with_clip(mut self, clip: ClipConfig) -> Result<Self> {
        clip.validate()?;
        self.clip = clip;
        Ok(self)
    }

    pub fn mcs_table(&self) -> &McsTable {
        &self.mcs
    }

    pub fn clip(&self) -> &ClipConfig {
        &self.clip
    }

    pub fn se(&self, u: Mcs) -> Result<f64> {
        self.mcs.se(u)
    }

    pub fn entries(&self) -> impl Iterator<Item = &SigmoidBlerEntry> {
        self.entries.values().flatten()
    }

    /// Resolves `(u, tbs)` to the entry with the nearest CBS; ties go to the larger CBS.
    pub fn entry(&self, u: Mcs, tbs: u32) -> Result<&SigmoidBlerEntry> {
        let rows = self.entries.get(&u).ok_or(Error::UnknownMcs(u))?;
        let mut best = &rows[0];
        for e in &rows[1..] {
            // rows are sorted ascending, so `<=` prefers the larger CBS on ties
            if e.cbs.abs_diff(tbs) <= best.cbs.abs_diff(tbs) {
                best = e;
            }
        }
        Ok(best)
    }

    pub fn bler(&self, u: Mcs, gamma_db: f64, tbs: u32) -> Result<f64> {
        Ok(self.entry(u, tbs)?.bler(gamma_db))
    }

    pub fn bler_clipped(&self, u: Mcs, gamma_db: f64, tbs: u32) -> Result<f64> {
        Ok(self.clip.clip_bler(self.bler(u, gamma_db, tbs)?))
    }

    pub fn scale_clipped(&self, u: Mcs, tbs: u32) -> Result<f64> {
        Ok(self.clip.clip_scale(self.entry(u, tbs)?.scale))
    }

    /// Clipped `(BLER, scale)` pair used by the SALAD update and score.
    pub fn clipped_pair(&self, u: Mcs, gamma_db: f64, tbs: u32) -> Result<(f64, f64)> {
        let e = self.entry(u, tbs)?;
        Ok(self.clip.clip_bler_scale(e.bler(gamma_db), e.scale))
    }

    /// Reads a table file (`mcs,cbs,center_db,scale_db`, `#` comments).
    ///
    /// Only the MCS indices that appear in the file are kept from `reference`.
    pub fn from_reader<R: Read>(reader: R, reference: &McsTable, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (line, rec) in read_rows(reader, origin, &["mcs", "cbs", "center_db", "scale_db"])? {
            let parse_err = |msg: String| Error::Parse { path: origin.into(), line, msg };
            let mcs: u8 = rec[0].parse().map_err(|_| parse_err(format!("bad mcs '{}'", rec[0])))?;
            let cbs: u32 = rec[1].parse().map_err(|_| parse_err(format!("bad cbs '{}'", rec[1])))?;
            let center: f64 = rec[2].parse().map_err(|_| parse_err(format!("bad center_db '{}'", rec[2])))?;
            let scale: f64 = rec[3].parse().map_err(|_| parse_err(format!("bad scale_db '{}'", rec[3])))?;
            entries.push(SigmoidBlerEntry { mcs: Mcs(mcs), cbs, center, scale });
        }
        let mut indices: Vec<Mcs> = entries.iter().map(|e| e.mcs).collect();
        indices.sort();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::InvalidTable(format!("{}: no entries", origin.display())));
        }
        let mcs = reference.subset(&indices)?;
        BlerTable::new(mcs, entries, ClipConfig::default())
    }

    pub fn load(path: &Path, reference: &McsTable) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f, reference, path)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "mcs,cbs,center_db,scale_db")?;
        for e in self.entries() {
            writeln!(w, "{},{},{},{}", e.mcs, e.cbs, e.center, e.scale)?;
        }
        Ok(())
    }
}

/// Comma-separated rows after a fixed header, with 1-based line numbers.
///
/// Blank lines and lines starting with `#` are skipped; fields are trimmed.
pub fn read_rows<R: Read>(mut reader: R, origin: &Path, header: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let mut text = String::new();
    reader.read_to_string(&mut text).map_err(|e| Error::io(origin, e))?;
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if !seen_header {
            if fields.iter().map(String::as_str).ne(header.iter().copied()) {
                return Err(Error::Parse { path: origin.into(), line: i + 1, msg: format!("expected header {}", header.join(",")) });
            }
            seen_header = true;
            continue;
        }
        if fields.len() != header.len() {
            return Err(Error::Parse {
                path: origin.into(),
                line: i + 1,
                msg: format!("expected {} fields, got {}", header.len(), fields.len()),
            });
        }
        rows.push((i + 1, fields));
    }
    if !seen_header {
        return Err(Error::Parse { path: origin.into(), line: 1, msg: format!("expected header {}", header.join(",")) });
    }
    Ok(rows)
}

fn interpolate_anchor(anchors: &[(f64, f64, f64)], se: f64) -> (f64, f64) {
    let n = anchors.len();
    let seg = match anchors.iter().position(|a| se <= a.0) {
        Some(0) => 0,
        Some(i) => i - 1,
        None => n - 2,
    };
    let (x0, c0, s0) = anchors[seg];
    let (x1, c1, s1) = anchors[seg + 1];
    let w = (se - x0) / (x1 - x0);
    let center = c0 + w * (c1 - c0);
    let scale = if se <= anchors[0].0 {
        anchors[0].2
    } else if se >= anchors[n - 1].0 {
        anchors[n - 1].2
    } else {
        s0 + w * (s1 - s0)
    };
    (center, scale)
}

/// Least-squares fit of `(center, scale)` to `(snr_db, bler)` samples.
///
/// A coarse grid over centers spanning the sample range and log-spaced
/// scales seeds a Levenberg-Marquardt refinement in `(center, ln scale)`,
/// which stops once the parameter step drops below `1e-8`.
pub fn fit_sigmoid(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::Fit(format!("need at least 2 points, got {}", points.len())));
    }
    if points.iter().any(|&(x, y)| !x.is_finite() || !(0.0..=1.0).contains(&y)) {
        return Err(Error::Fit("samples must have finite SNR and BLER in [0, 1]".into()));
    }
    let interior = points.iter().filter(|&&(_, y)| y > 0.0 && y < 1.0).count();
    if interior < 2 {
        return Err(Error::Fit(format!("need at least 2 samples with 0 < BLER < 1, got {interior}")));
    }

    let mse = |c: f64, ls: f64| -> f64 {
        let s = ls.exp();
        points.iter().map(|&(x, y)| (sigmoid_bler(x, c, s) - y).powi(2)).sum::<f64>() / points.len() as f64
    };

    let (xmin, xmax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    let span = (xmax - xmin).max(1e-3);
    let mut best = (0.0, 0.0, f64::INFINITY);
    for i in 0..=60 {
        let c = xmin + span * (i as f64) / 60.0;
        for j in 0..=40 {
            let ls = (span * 1e-4).ln() + (j as f64) / 40.0 * (1e5f64).ln();
            let m = mse(c, ls);
            if m < best.2 {
                best = (c, ls, m);
            }
        }
    }

    let (mut c, mut ls, mut loss) = best;
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let s = ls.exp();
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, y) in points {
            let z = (x - c) / s;
            let m = 1.0 / (1.0 + z.exp());
            let dm = m * (1.0 - m);
            let jc = dm / s;
            let jl = dm * z;
            let r = m - y;
            a11 += jc * jc;
            a12 += jc * jl;
            a22 += jl * jl;
            g1 += jc * r;
            g2 += jl * r;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let b11 = a11 + lambda * a11.max(1e-12);
            let b22 = a22 + lambda * a22.max(1e-12);
            let det = b11 * b22 - a12 * a12;
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let dc = -(b22 * g1 - a12 * g2) / det;
            let dl = -(b11 * g2 - a12 * g1) / det;
            let trial = mse(c + dc, ls + dl);
            if trial <= loss {
                c += dc;
                ls += dl;
                let step = dc.abs().max(dl.abs());
                loss = trial;
                lambda = (lambda / 10.0).max(1e-12);
                improved = step >= 1e-8;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let s = ls.exp();
    if !(c.is_finite() && s.is_finite() && s > 0.0) {
        return Err(Error::Fit("fit diverged".into()));
    }
    Ok((c, s))
}

/// Mean squared error of a fitted sigmoid on the given samples.
pub fn fit_mse(points: &[(f64, f64)], center: f64, scale: f64) -> f64 {
    points.iter().map(|&(x, y)| (sigmoid_bler(x, center, scale) - y).powi(2)).sum::<f64>() / points.len() as f64
}
