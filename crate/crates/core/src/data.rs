//! Seeded synthetic data streams.
//!
//! Every batch is drawn from its own ChaCha8 generator keyed by
//! `(seed, agent, iteration, purpose)`, so batches can be produced in any
//! order, from any thread, and always come out bit-identical.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::regression::{DataBatch, ProblemSpec};
use crate::CSV_VERSION_LINE;

/// What a keyed stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 0,
    Policy = 1,
    GradientCovariance = 2,
    Appendix = 3,
    Problem = 4,
}

/// Key of one counter-based stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub agent: u64,
    pub iteration: u64,
    pub purpose: Purpose,
}

/// Deterministic generator derived from a [`StreamKey`].
#[derive(Debug, Clone)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    pub fn new(key: StreamKey) -> Self {
        let mut bytes = [0u8; 32];
        bytes[0..8].copy_from_slice(&key.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&key.agent.to_le_bytes());
        bytes[16..24].copy_from_slice(&key.iteration.to_le_bytes());
        bytes[24..32].copy_from_slice(&(key.purpose as u64).to_le_bytes());
        Self(ChaCha8Rng::from_seed(bytes))
    }

    pub fn keyed(seed: u64, agent: u64, iteration: u64, purpose: Purpose) -> Self {
        Self::new(StreamKey {
            seed,
            agent,
            iteration,
            purpose,
        })
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Per-agent, per-iteration sampling configuration.
#[derive(Debug, Clone)]
pub struct StreamConfig {
    spec: ProblemSpec,
    batch_size: usize,
    num_agents: usize,
    seed: u64,
    /// Lower Cholesky factor of the feature covariance, row-major.
    factor: Vec<f64>,
}

impl StreamConfig {
    pub fn new(spec: ProblemSpec, batch_size: usize, num_agents: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                reason: "must be at least 1".into(),
            });
        }
        if num_agents == 0 {
            return Err(Error::InvalidParameter {
                name: "num_agents",
                reason: "must be at least 1".into(),
            });
        }
        let chol = nalgebra::Cholesky::new(spec.feature_cov().clone())
            .ok_or_else(|| Error::InvalidProblem("covariance has no Cholesky factor".into()))?;
        let l = chol.l();
        let n = spec.dim();
        let factor = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| l[(i, j)])
            .collect();
        Ok(Self {
            spec,
            batch_size,
            num_agents,
            seed,
            factor,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_batch_size(&self, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                reason: "must be at least 1".into(),
            });
        }
        Ok(Self {
            batch_size,
            ..self.clone()
        })
    }

    /// Draws a batch from an arbitrary stream; used where the `(agent,
    /// iteration)` grid does not apply, e.g. covariance estimation.
    pub fn draw_keyed(&self, key: StreamKey) -> DataBatch {
        let n = self.spec.dim();
        let noise = self.spec.noise_std();
        let mut rng = RngStream::new(key);
        let mut z = vec![0.0; n];
        let mut features = Vec::with_capacity(self.batch_size * n);
        let mut labels = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            z.iter_mut().for_each(|v| *v = rng.standard_normal());
            let start = features.len();
            for i in 0..n {
                let row = &self.factor[i * n..i * n + i + 1];
                features.push(row.iter().zip(&z).map(|(l, zj)| l * zj).sum::<f64>());
            }
            let x = &features[start..];
            let clean: f64 = x.iter().zip(self.spec.true_weights()).map(|(a, b)| a * b).sum();
            let eta = rng.standard_normal();
            labels.push(clean + noise * eta);
        }
        DataBatch::new(n, features, labels).expect("batch shape is consistent by construction")
    }
}

/// Batch for `agent` at `iteration`; identical keys give identical batches.
pub fn draw_batch(cfg: &StreamConfig, agent: usize, iteration: u64) -> Result<DataBatch> {
    if agent >= cfg.num_agents {
        return Err(Error::IndexOutOfRange {
            what: "agent",
            index: agent as u64,
            limit: cfg.num_agents as u64,
        });
    }
    Ok(cfg.draw_keyed(StreamKey {
        seed: cfg.seed,
        agent: agent as u64,
        iteration,
        purpose: Purpose::Data,
    }))
}

/// `(1/N) Σ xᵢxᵢᵀ`.
pub fn empirical_second_moment(batch: &DataBatch) -> DMatrix<f64> {
    let n = batch.dim();
    let mut m = DMatrix::zeros(n, n);
    for x in batch.rows() {
        for i in 0..n {
            for j in i..n {
                m[(i, j)] += x[i] * x[j];
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for i in 0..n {
        for j in i..n {
            let v = m[(i, j)] * inv;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// One batch tagged with its stream coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedBatch {
    pub agent: usize,
    pub iteration: u64,
    pub batch: DataBatch,
}

/// Writes batches as CSV with header `agent,iteration,sample,x0..x{n-1},y`,
/// preceded by the format comment line.
pub fn write_batches_csv<W: Write>(mut out: W, batches: &[TaggedBatch]) -> Result<()> {
    writeln!(out, "{CSV_VERSION_LINE}")?;
    let dim = batches.first().map_or(0, |b| b.batch.dim());
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["agent".to_string(), "iteration".into(), "sample".into()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    header.push("y".into());
    wtr.write_record(&header)?;
    for tb in batches {
        if tb.batch.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: tb.batch.dim(),
            });
        }
        for (s, (x, y)) in tb.batch.rows().zip(tb.batch.labels()).enumerate() {
            let mut rec = vec![tb.agent.to_string(), tb.iteration.to_string(), s.to_string()];
            rec.extend(x.iter().map(f64::to_string));
            rec.push(y.to_string());
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Inverse of [`write_batches_csv`]. Rows of one `(agent, iteration)` must be
/// contiguous and ordered by `sample`.
pub fn read_batches_csv<R: Read>(input: R) -> Result<Vec<TaggedBatch>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 5 || cols[..3] != ["agent", "iteration", "sample"] || cols[cols.len() - 1] != "y" {
        return Err(Error::Malformed(format!("unexpected batch header {cols:?}")));
    }
    let dim = cols.len() - 4;
    for (i, c) in cols[3..3 + dim].iter().enumerate() {
        if *c != format!("x{i}") {
            return Err(Error::Malformed(format!("unexpected column `{c}`")));
        }
    }

    let parse = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Malformed(format!("bad {what} `{s}`: {e}")))
    };
    let mut out: Vec<TaggedBatch> = Vec::new();
    let mut current: Option<(usize, u64, Vec<f64>, Vec<f64>)> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let agent: usize = rec[0]
            .parse()
            .map_err(|e| Error::Malformed(format!("bad agent `{}`: {e}", &rec[0])))?;
        let iteration: u64 = rec[1]
            .parse()
            .map_err(|e| Error::Malformed(format!("bad iteration `{}`: {e}", &rec[1])))?;
        let sample: usize = rec[2]
            .parse()
            .map_err(|e| Error::Malformed(format!("bad sample `{}`: {e}", &rec[2])))?;
        let same = matches!(&current, Some((a, k, _, _)) if *a == agent && *k == iteration);
        if !same {
            if let Some((a, k, f, l)) = current.take() {
                out.push(TaggedBatch {
                    agent: a,
                    iteration: k,
                    batch: DataBatch::new(dim, f, l)?,
                });
            }
            current = Some((agent, iteration, Vec::new(), Vec::new()));
        }
        let (_, _, feats, labels) = current.as_mut().expect("set above");
        if sample != labels.len() {
            return Err(Error::Malformed(format!(
                "sample index {sample} out of sequence for agent {agent}, iteration {iteration}"
            )));
        }
        for i in 0..dim {
            feats.push(parse(&rec[3 + i], "feature")?);
        }
        labels.push(parse(&rec[3 + dim], "label")?);
    }
    if let Some((a, k, f, l)) = current {
        out.push(TaggedBatch {
            agent: a,
            iteration: k,
            batch: DataBatch::new(dim, f, l)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(noise: f64) -> StreamConfig {
        let spec = ProblemSpec::diagonal(vec![3.0, 5.0], &[3.0, 1.0], noise).unwrap();
        StreamConfig::new(spec, 5, 2, 42).unwrap()
    }

    #[test]
    fn noiseless_labels_are_exact() {
        let c = cfg(0.0);
        let b = draw_batch(&c, 1, 7).unwrap();
        for (x, y) in b.rows().zip(b.labels()) {
            assert_eq!(*y, 3.0 * x[0] + 5.0 * x[1]);
        }
    }

    #[test]
    fn same_key_same_batch() {
        let c = cfg(1.0);
        assert_eq!(draw_batch(&c, 0, 3).unwrap(), draw_batch(&c, 0, 3).unwrap());
        assert_ne!(draw_batch(&c, 0, 3).unwrap(), draw_batch(&c, 1, 3).unwrap());
        assert_ne!(draw_batch(&c, 0, 3).unwrap(), draw_batch(&c, 0, 4).unwrap());
        assert_ne!(
            draw_batch(&c, 0, 3).unwrap(),
            draw_batch(&c.with_seed(43), 0, 3).unwrap()
        );
    }

    #[test]
    fn out_of_order_access_matches_in_order() {
        let c = cfg(1.0);
        let forward: Vec<_> = (0..6).map(|k| draw_batch(&c, 1, k).unwrap()).collect();
        let mut backward: Vec<_> = (0..6).rev().map(|k| draw_batch(&c, 1, k).unwrap()).collect();
        backward.reverse();
        assert_eq!(forward, backward);
    }

    #[test]
    fn agent_out_of_range() {
        let c = cfg(1.0);
        assert!(matches!(
            draw_batch(&c, 2, 0),
            Err(Error::IndexOutOfRange { what: "agent", .. })
        ));
    }

    #[test]
    fn config_validation() {
        let spec = ProblemSpec::diagonal(vec![0.0], &[1.0], 1.0).unwrap();
        assert!(StreamConfig::new(spec.clone(), 0, 1, 0).is_err());
        assert!(StreamConfig::new(spec, 1, 0, 0).is_err());
    }

    #[test]
    fn second_moment_single_sample() {
        let b = DataBatch::from_rows(&[vec![1.0, 0.0]], vec![0.0]).unwrap();
        let m = empirical_second_moment(&b);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn second_moment_is_symmetric() {
        let spec = ProblemSpec::new(
            vec![0.0; 3],
            DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]),
            1.0,
        )
        .unwrap();
        let c = StreamConfig::new(spec, 17, 1, 9).unwrap();
        for k in 0..20 {
            let m = empirical_second_moment(&draw_batch(&c, 0, k).unwrap());
            assert_eq!(m, m.transpose());
        }
    }

    #[test]
    fn csv_round_trip() {
        let c = cfg(1.0);
        let batches: Vec<_> = (0..2)
            .flat_map(|a| (0..3).map(move |k| (a, k)))
            .map(|(agent, iteration)| TaggedBatch {
                agent,
                iteration,
                batch: draw_batch(&c, agent, iteration).unwrap(),
            })
            .collect();
        let mut buf = Vec::new();
        write_batches_csv(&mut buf, &batches).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_VERSION_LINE));
        assert_eq!(lines.next(), Some("agent,iteration,sample,x0,x1,y"));
        assert_eq!(read_batches_csv(buf.as_slice()).unwrap(), batches);
    }

    #[test]
    fn csv_rejects_bad_header() {
        let text = "agent,iteration,sample,z0,y\n0,0,0,1.0,2.0\n";
        assert!(read_batches_csv(text.as_bytes()).is_err());
        let gap = "agent,iteration,sample,x0,y\n0,0,1,1.0,2.0\n";
        assert!(read_batches_csv(gap.as_bytes()).is_err());
    }
}
