// SPDX-License-Identifier: MIT OR Apache-2.0

//! Latent geometry across languages: joint PCA of per-layer latents and
//! Pearson correlation of their first principal coordinate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::ModelHandle;
use crate::error::{Error, Result};
use crate::io;
use crate::language::LanguageCode;
use crate::par::Exec;

/// What a latent row holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    /// Hidden state projected through final norm and unembedding.
    #[default]
    Logits,
    /// Raw hidden state.
    Hidden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix {
    pub lang: LanguageCode,
    pub layer: usize,
    pub instance_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Prompts of one language keyed by instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguagePrompts {
    pub lang: LanguageCode,
    pub prompts: Vec<(String, String)>,
}

/// Latents at `layer` for every language, rows ordered by instance id.
pub fn collect_latents(
    handle: &ModelHandle,
    prompts: &[LanguagePrompts],
    layer: usize,
    kind: LatentKind,
    exec: Exec,
) -> Result<Vec<LatentMatrix>> {
    Ok(collect_latents_layers(handle, prompts, &[layer], kind, exec)?
        .pop()
        .unwrap_or_default())
}

/// Like [`collect_latents`] for several layers at once, one forward pass per
/// prompt. The outer vector follows `layers`.
pub fn collect_latents_layers(
    handle: &ModelHandle,
    prompts: &[LanguagePrompts],
    layers: &[usize],
    kind: LatentKind,
    exec: Exec,
) -> Result<Vec<Vec<LatentMatrix>>> {
    if let Some(&layer) = layers.iter().find(|&&l| l > handle.n_layers()) {
        return Err(Error::InvalidInput(format!(
            "layer {layer} out of range 0..={}",
            handle.n_layers()
        )));
    }
    let Some(first) = prompts.first() else {
        return Ok(layers.iter().map(|_| Vec::new()).collect());
    };
    let reference: BTreeSet<&str> = first.prompts.iter().map(|(id, _)| id.as_str()).collect();
    if reference.len() != first.prompts.len() {
        return Err(Error::Data(format!("duplicate instance ids for language {}", first.lang)));
    }
    for lp in &prompts[1..] {
        let ids: BTreeSet<&str> = lp.prompts.iter().map(|(id, _)| id.as_str()).collect();
        if ids != reference || ids.len() != lp.prompts.len() {
            let orphans = ids
                .symmetric_difference(&reference)
                .map(|s| s.to_string())
                .collect::<Vec<_>>();
            return Err(Error::Alignment { orphans });
        }
    }
    let mut out: Vec<Vec<LatentMatrix>> = layers.iter().map(|_| Vec::with_capacity(prompts.len())).collect();
    for lp in prompts {
        let mut sorted: Vec<&(String, String)> = lp.prompts.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let per_prompt = exec.try_map(&sorted, |(_, prompt)| {
            let trace = handle.forward_trace(prompt)?;
            layers
                .iter()
                .map(|&l| match kind {
                    LatentKind::Logits => handle.unembed(&trace.hidden[l]),
                    LatentKind::Hidden => Ok(trace.hidden[l].clone()),
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let ids: Vec<String> = sorted.iter().map(|(id, _)| id.clone()).collect();
        for (li, &layer) in layers.iter().enumerate() {
            out[li].push(LatentMatrix {
                lang: lp.lang,
                layer,
                instance_ids: ids.clone(),
                rows: per_prompt.iter().map(|r| r[li].clone()).collect(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Unit-norm principal axes, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component (sample covariance eigenvalues).
    pub variances: Vec<f64>,
    /// Fraction of total variance per component.
    pub explained: Vec<f64>,
}

/// Eigen-decomposition of a symmetric `n×n` matrix by cyclic Jacobi
/// rotations. Returns `(eigenvalues, eigenvectors as columns)` unsorted.
pub fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * frob || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let width = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::DimensionMismatch {
            expected: width,
            got: r.len(),
        });
    }
    Ok(width)
}

/// Mean-centred PCA through the sample covariance matrix. Each component
/// is signed so its largest-magnitude coordinate is positive.
pub fn pca_fit(rows: &[Vec<f64>], dims: usize) -> Result<PcaModel> {
    let width = check_rows(rows)?;
    let n = rows.len();
    if dims == 0 || dims > width {
        return Err(Error::InvalidInput(format!("cannot extract {dims} components from width {width}")));
    }
    if n < dims + 1 {
        return Err(Error::InvalidInput(format!("{dims} components need at least {} rows, got {n}", dims + 1)));
    }
    let mut mean = vec![0.0; width];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; width * width];
    let mut centred = vec![0.0; width];
    for r in rows {
        for j in 0..width {
            centred[j] = r[j] - mean[j];
        }
        for i in 0..width {
            let ci = centred[i];
            for j in i..width {
                cov[i * width + j] += ci * centred[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..width {
        for j in i..width {
            let v = cov[i * width + j] / denom;
            cov[i * width + j] = v;
            cov[j * width + i] = v;
        }
    }
    let total: f64 = (0..width).map(|i| cov[i * width + i]).sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::ZeroVariance("latent rows have no variance".into()));
    }

    let (vals, vecs) = symmetric_eigen(cov, width);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(dims);
    let mut variances = Vec::with_capacity(dims);
    for &k in order.iter().take(dims) {
        let mut c: Vec<f64> = (0..width).map(|i| vecs[i * width + k]).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        let lead = c
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > c[best].abs() { i } else { best });
        let sign = if c[lead] < 0.0 { -1.0 } else { 1.0 };
        c.iter_mut().for_each(|x| *x *= sign / norm);
        components.push(c);
        variances.push(vals[k].max(0.0));
    }
    let explained = variances.iter().map(|v| v / total).collect();
    Ok(PcaModel {
        mean,
        components,
        variances,
        explained,
    })
}

/// Coordinates of each row along the model's components.
pub fn pca_project(model: &PcaModel, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let width = model.mean.len();
    rows.iter()
        .map(|r| {
            if r.len() != width {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    got: r.len(),
                });
            }
            Ok(model
                .components
                .iter()
                .map(|c| c.iter().zip(r).zip(&model.mean).map(|((ci, x), m)| ci * (x - m)).sum())
                .collect())
        })
        .collect()
}

/// Product-moment correlation of two aligned score vectors.
pub fn pearson_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput("correlation needs at least two points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance("score vector is constant".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric table of pairwise correlations at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTable {
    pub layer: usize,
    /// Languages in table order.
    pub languages: Vec<LanguageCode>,
    entries: BTreeMap<(LanguageCode, LanguageCode), f64>,
}

impl CorrelationTable {
    /// Correlate every pair (including each language with itself) of
    /// instance-aligned score vectors.
    pub fn from_scores(layer: usize, scores: &[(LanguageCode, Vec<f64>)]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, (la, a)) in scores.iter().enumerate() {
            for (lb, b) in &scores[i..] {
                let r = pearson_1d(a, b)?;
                entries.insert((*la, *lb), r);
                entries.insert((*lb, *la), r);
            }
        }
        Ok(CorrelationTable {
            layer,
            languages: scores.iter().map(|(l, _)| *l).collect(),
            entries,
        })
    }

    pub fn get(&self, a: LanguageCode, b: LanguageCode) -> Option<f64> {
        self.entries.get(&(a, b)).copied()
    }

    /// Upper-triangle pairs in table order, diagonal included.
    pub fn pairs(&self) -> Vec<(LanguageCode, LanguageCode, f64)> {
        let mut out = Vec::new();
        for (i, &a) in self.languages.iter().enumerate() {
            for &b in &self.languages[i..] {
                out.push((a, b, self.entries[&(a, b)]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub lang: LanguageCode,
    pub instance_id: String,
    pub pc1: f64,
    pub pc2: f64,
}

/// Joint PCA over all languages plus the per-language first-coordinate
/// correlation table.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryStudy {
    pub model: PcaModel,
    pub points: Vec<ScatterPoint>,
    pub correlations: CorrelationTable,
}

pub fn geometry_study(matrices: &[LatentMatrix]) -> Result<GeometryStudy> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::InvalidInput("no latent matrices".into()))?;
    if matrices.len() < 2 {
        return Err(Error::InvalidInput("geometry needs at least two languages".into()));
    }
    for m in matrices {
        if m.instance_ids != first.instance_ids || m.rows.len() != m.instance_ids.len() {
            return Err(Error::Data(format!("latents for {} are not aligned with {}", m.lang, first.lang)));
        }
    }
    let stacked: Vec<Vec<f64>> = matrices.iter().flat_map(|m| m.rows.iter().cloned()).collect();
    let model = pca_fit(&stacked, 2)?;
    let mut points = Vec::with_capacity(stacked.len());
    let mut scores = Vec::with_capacity(matrices.len());
    for m in matrices {
        let proj = pca_project(&model, &m.rows)?;
        scores.push((m.lang, proj.iter().map(|p| p[0]).collect::<Vec<_>>()));
        points.extend(m.instance_ids.iter().zip(&proj).map(|(id, p)| ScatterPoint {
            lang: m.lang,
            instance_id: id.clone(),
            pc1: p[0],
            pc2: p[1],
        }));
    }
    let correlations = CorrelationTable::from_scores(first.layer, &scores)?;
    Ok(GeometryStudy {
        model,
        points,
        correlations,
    })
}

pub fn write_scatter_csv(path: &Path, points: &[ScatterPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.write_record([
            p.lang.as_str(),
            &p.instance_id,
            &p.pc1.to_string(),
            &p.pc2.to_string(),
        ])?;
    }
    finish(path, w, &["lang", "instance_id", "pc1", "pc2"])
}

pub fn read_scatter_csv(path: &Path) -> Result<Vec<ScatterPoint>> {
    let text = io::read_to_string(path)?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// One line of a correlation export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub pair: String,
    pub base: f64,
    pub trained: Option<f64>,
}

fn pair_name(a: LanguageCode, b: LanguageCode) -> String {
    format!("{a}-{b}")
}

/// Rows `pair,base,trained`; `trained` is empty when no tuned table is
/// given. Values are written in shortest round-trip form.
pub fn correlation_rows(base: &CorrelationTable, trained: Option<&CorrelationTable>) -> Result<Vec<CorrelationRow>> {
    base.pairs()
        .into_iter()
        .map(|(a, b, r)| {
            let t = match trained {
                Some(t) => Some(t.get(a, b).ok_or_else(|| {
                    Error::Data(format!("trained table lacks pair {}", pair_name(a, b)))
                })?),
                None => None,
            };
            Ok(CorrelationRow {
                pair: pair_name(a, b),
                base: r,
                trained: t,
            })
        })
        .collect()
}

pub fn write_correlation_csv(path: &Path, rows: &[CorrelationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record([
            r.pair.clone(),
            r.base.to_string(),
            r.trained.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    finish(path, w, &["pair", "base", "trained"])
}

pub fn read_correlation_csv(path: &Path) -> Result<Vec<CorrelationRow>> {
    let text = io::read_to_string(path)?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

fn finish(path: &Path, w: csv::Writer<Vec<u8>>, header: &[&str]) -> Result<()> {
    let body = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    let mut bytes = header.join(",").into_bytes();
    bytes.push(b'\n');
    bytes.extend(body);
    io::write_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lc(s: &str) -> LanguageCode {
        LanguageCode::new(s).unwrap()
    }

    #[test]
    fn collinear_points_explain_everything() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let m = pca_fit(&rows, 1).unwrap();
        assert!((m.explained[0] - 1.0).abs() < 1e-12);
        let c = &m.components[0];
        assert!(c[1] > 0.0 && (c[1] / c[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn preconditions() {
        let two = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(pca_fit(&two, 2).is_err());
        let flat = vec![vec![1.0, 1.0]; 4];
        assert!(matches!(pca_fit(&flat, 1), Err(Error::ZeroVariance(_))));
        let m = pca_fit(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![3.0, 1.0]], 2).unwrap();
        assert!(pca_project(&m, &[vec![1.0]]).is_err());
        let origin = pca_project(&m, std::slice::from_ref(&m.mean)).unwrap();
        assert!(origin[0].iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn pearson_basics() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson_1d(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_1d(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson_1d(&a, &[1.0; 4]).is_err());
        assert!(pearson_1d(&a, &a[..3]).is_err());
    }

    #[test]
    fn correlation_csv_keeps_negative_values_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corr.csv");
        let rows = vec![
            CorrelationRow {
                pair: "en-sw".into(),
                base: -0.0424,
                trained: Some(0.8514),
            },
            CorrelationRow {
                pair: "en-en".into(),
                base: 1.0,
                trained: None,
            },
        ];
        write_correlation_csv(&path, &rows).unwrap();
        let back = read_correlation_csv(&path).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[0].base.to_bits(), (-0.0424f64).to_bits());
    }

    #[test]
    fn study_has_unit_diagonal() {
        let ids: Vec<String> = (0..5).map(|i| format!("i{i}")).collect();
        let mk = |lang: &str, shift: f64| LatentMatrix {
            lang: lc(lang),
            layer: 1,
            instance_ids: ids.clone(),
            rows: (0..5)
                .map(|i| vec![i as f64 + shift, (i * i) as f64 * 0.3 - shift, (i % 2) as f64])
                .collect(),
        };
        let s = geometry_study(&[mk("en", 0.0), mk("zh", 0.5)]).unwrap();
        assert_eq!(s.points.len(), 10);
        assert!((s.correlations.get(lc("en"), lc("en")).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            s.correlations.get(lc("en"), lc("zh")),
            s.correlations.get(lc("zh"), lc("en"))
        );
        assert_eq!(s.correlations.pairs().len(), 3);
    }
}
