//! Codebook comparison: pairwise codeword MSE, minimum-MSE matching of one
//! codebook against another, and ordering by mean within-codebook MSE.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::error::{Error, Result};
use crate::models::Codebook;

/// Dense row-major matrix of pairwise MSEs.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            data.extend((0..self.rows).map(|i| self.get(i, j)));
        }
        Matrix { rows: self.cols, cols: self.rows, data }
    }

    /// CSV with a header row of column indices.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = (0..self.cols).map(|j| j.to_string()).collect();
        let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.rows {
            w.write_record(self.row(i).iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
    }

    pub fn from_csv(bytes: &[u8], path: &Path) -> Result<Matrix> {
        let mut r = csv::Reader::from_reader(bytes);
        let cols = r.headers().map_err(|e| Error::format(path, e.to_string()))?.len();
        let mut data = Vec::new();
        let mut rows = 0;
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            for field in &rec {
                data.push(field.parse::<f64>().map_err(|e| Error::format(path, format!("row {rows}: {e}")))?);
            }
            rows += 1;
        }
        if data.len() != rows * cols {
            return Err(Error::format(path, "ragged matrix"));
        }
        Ok(Matrix { rows, cols, data })
    }
}

fn check_dims(a: &Codebook, b: &Codebook) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "codeword dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

/// Entry `(i, j)`: mean over the `D` dimensions of the squared difference
/// between codeword `i` of `a` and codeword `j` of `b`.
pub fn pairwise_mse(a: &Codebook, b: &Codebook) -> Result<Matrix> {
    check_dims(a, b)?;
    let mut data = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        data.extend((0..b.len()).map(|j| mse(a.row(i), b.row(j))));
    }
    Ok(Matrix { rows: a.len(), cols: b.len(), data })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodewordMatch {
    pub new_index: usize,
    pub original_index: usize,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub original_id: String,
    pub new_id: String,
    pub matches: Vec<CodewordMatch>,
    pub average_mse: f64,
    /// Distinct original codewords that are the match of some new codeword.
    pub num_subselected: usize,
}

/// Matches every codeword of `new` with its minimum-MSE codeword in
/// `original`, lowest index on ties.
pub fn match_codebooks(new: &Codebook, new_id: &str, original: &Codebook, original_id: &str) -> Result<MatchReport> {
    check_dims(new, original)?;
    let matches: Vec<CodewordMatch> = (0..new.len())
        .map(|i| {
            let mut best = CodewordMatch { new_index: i, original_index: 0, mse: f64::INFINITY };
            for j in 0..original.len() {
                let e = mse(new.row(i), original.row(j));
                if e < best.mse {
                    best.original_index = j;
                    best.mse = e;
                }
            }
            best
        })
        .collect();
    let average_mse = matches.iter().map(|m| m.mse).sum::<f64>() / matches.len() as f64;
    let num_subselected = matches.iter().map(|m| m.original_index).collect::<BTreeSet<_>>().len();
    Ok(MatchReport {
        original_id: original_id.into(),
        new_id: new_id.into(),
        matches,
        average_mse,
        num_subselected,
    })
}

/// Mean MSE of each codeword to every other codeword of the same codebook.
pub fn within_mse(cb: &Codebook) -> Vec<f64> {
    let k = cb.len();
    (0..k)
        .map(|i| {
            if k < 2 {
                return 0.0;
            }
            (0..k).filter(|&j| j != i).map(|j| mse(cb.row(i), cb.row(j))).sum::<f64>() / (k - 1) as f64
        })
        .collect()
}

/// Codeword indices sorted by ascending within-codebook mean MSE; ties keep
/// index order.
pub fn order_by_within_mse(cb: &Codebook) -> Vec<usize> {
    let w = within_mse(cb);
    let mut idx: Vec<usize> = (0..cb.len()).collect();
    idx.sort_by(|&a, &b| w[a].total_cmp(&w[b]));
    idx
}

/// Gaussian codebook of the same shape whose dimensions match the
/// per-dimension mean and standard deviation of `like`.
pub fn gaussian_codebook_like(like: &Codebook, seed: u64) -> Result<Codebook> {
    let (k, d) = (like.len(), like.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut moments = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = (0..k).map(|i| like.row(i)[j] as f64).collect();
        let m = col.iter().sum::<f64>() / k as f64;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / k as f64).sqrt();
        moments.push(Normal::new(m, sd.max(1e-12)).map_err(|e| Error::invalid(e.to_string()))?);
    }
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        data.extend(moments.iter().map(|n| n.sample(&mut rng) as f32));
    }
    Codebook::new(k, d, data)
}

/// Three matched pairs spread over the MSE range: the worst, the median and
/// the best match.
pub fn highlighted(report: &MatchReport) -> Vec<CodewordMatch> {
    let mut sorted = report.matches.clone();
    sorted.sort_by(|a, b| b.mse.total_cmp(&a.mse).then(a.new_index.cmp(&b.new_index)));
    let n = sorted.len();
    let mut picks = vec![0, n / 2, n.saturating_sub(1)];
    picks.dedup();
    picks.into_iter().filter(|&i| i < n).map(|i| sorted[i].clone()).collect()
}

#[derive(Serialize)]
struct ReportFile<'a> {
    original_id: &'a str,
    new_id: &'a str,
    average_mse: f64,
    num_subselected: usize,
    codebook_size: usize,
    highlighted: Vec<CodewordMatch>,
    matches: &'a [CodewordMatch],
}

fn codewords_csv(cb: &Codebook, order: &[usize]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    let mut header = vec!["codeword".to_string(), "rank".to_string()];
    header.extend((0..cb.dim()).map(|j| format!("d{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (rank, &i) in order.iter().enumerate() {
        let mut rec = vec![i.to_string(), rank.to_string()];
        rec.extend(cb.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// Writes the match report as JSON, the new-vs-original and both within
/// MSE matrices as CSV (rows and columns in within-MSE order), and one
/// codeword CSV per codebook.
pub fn export_analysis(dir: &Path, report: &MatchReport, new: &Codebook, original: &Codebook) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let on = order_by_within_mse(new);
    let oo = order_by_within_mse(original);
    let reorder = |m: &Matrix, r: &[usize], c: &[usize]| Matrix {
        rows: r.len(),
        cols: c.len(),
        data: r.iter().flat_map(|&i| c.iter().map(move |&j| m.get(i, j))).collect(),
    };
    let (nid, oid) = (&report.new_id, &report.original_id);
    let cross = reorder(&pairwise_mse(new, original)?, &on, &oo);
    write_atomic(&dir.join(format!("mse_{nid}_vs_{oid}.csv")), &cross.to_csv()?)?;
    let wn = reorder(&pairwise_mse(new, new)?, &on, &on);
    write_atomic(&dir.join(format!("mse_{nid}_within.csv")), &wn.to_csv()?)?;
    if nid != oid {
        let wo = reorder(&pairwise_mse(original, original)?, &oo, &oo);
        write_atomic(&dir.join(format!("mse_{oid}_within.csv")), &wo.to_csv()?)?;
    }
    write_atomic(&dir.join(format!("codewords_{nid}.csv")), &codewords_csv(new, &on)?)?;
    write_atomic(&dir.join(format!("codewords_{oid}.csv")), &codewords_csv(original, &oo)?)?;
    let file = ReportFile {
        original_id: oid,
        new_id: nid,
        average_mse: report.average_mse,
        num_subselected: report.num_subselected,
        codebook_size: original.len(),
        highlighted: highlighted(report),
        matches: &report.matches,
    };
    write_atomic(&dir.join(format!("match_{nid}_to_{oid}.json")), &serde_json::to_vec_pretty(&file)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(k: usize, d: usize, seed: u64) -> Codebook {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Codebook::new(k, d, (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pairwise_examples() {
        let a = Codebook::new(2, 2, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let m = pairwise_mse(&a, &a).unwrap();
        assert_eq!(m.data, vec![0.0, 4.0, 4.0, 0.0]);
        let (x, y) = (random(8, 5, 1), random(8, 5, 2));
        let m = pairwise_mse(&x, &y).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += (x.row(i)[k] as f64 - y.row(j)[k] as f64).powi(2);
                }
                assert_eq!(m.get(i, j), s / 5.0);
            }
        }
        assert_eq!(pairwise_mse(&y, &x).unwrap(), m.transpose());
        assert!(pairwise_mse(&x, &random(8, 4, 1)).is_err());
    }

    #[test]
    fn duplicated_rows_subselect_distinct_originals() {
        let orig = random(6, 3, 3);
        let mut rows = Vec::new();
        for i in [0, 0, 2, 2, 2, 5] {
            rows.extend_from_slice(orig.row(i));
        }
        let new = Codebook::new(6, 3, rows).unwrap();
        let r = match_codebooks(&new, "n", &orig, "o").unwrap();
        assert_eq!(r.num_subselected, 3);
        assert_eq!(r.average_mse, 0.0);
    }

    #[test]
    fn ordering_examples() {
        let same = Codebook::new(4, 2, vec![0.5; 8]).unwrap();
        assert_eq!(order_by_within_mse(&same), vec![0, 1, 2, 3]);
        let outlier = Codebook::new(4, 1, vec![9.0, 0.0, 0.1, -0.1]).unwrap();
        assert_eq!(*order_by_within_mse(&outlier).last().unwrap(), 0);
    }

    #[test]
    fn matrix_csv_round_trip_is_exact() {
        let m = pairwise_mse(&random(5, 3, 4), &random(7, 3, 5)).unwrap();
        let back = Matrix::from_csv(&m.to_csv().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn gaussian_twin_matches_moments() {
        let cb = random(256, 4, 6);
        let g = gaussian_codebook_like(&cb, 1).unwrap();
        assert_eq!((g.len(), g.dim()), (256, 4));
        let mean: f64 = (0..256).map(|i| g.row(i)[0] as f64).sum::<f64>() / 256.0;
        assert!(mean.abs() < 0.1);
    }
}
