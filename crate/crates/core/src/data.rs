//! Irregular multivariate time series: instances, JSON Lines I/O,
//! normalization, splitting and padded batches.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub t: f64,
    /// 0-based channel index.
    pub c: usize,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub t: f64,
    pub c: usize,
}

/// One forecasting problem: observed history, query points and the values
/// at those points.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesInstance {
    pub series_id: String,
    pub channels: usize,
    pub observations: Vec<Observation>,
    pub queries: Vec<Query>,
    pub targets: Vec<f64>,
}

impl SeriesInstance {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| CoreError::InvalidRecord {
            series_id: self.series_id.clone(),
            reason,
        };
        if self.targets.len() != self.queries.len() {
            return Err(bad(format!(
                "{} targets for {} queries",
                self.targets.len(),
                self.queries.len()
            )));
        }
        for o in &self.observations {
            if o.c >= self.channels {
                return Err(bad(format!("observation channel {} out of range", o.c + 1)));
            }
            if !o.t.is_finite() || !o.y.is_finite() {
                return Err(bad("non-finite observation".into()));
            }
        }
        for q in &self.queries {
            if q.c >= self.channels {
                return Err(bad(format!("query channel {} out of range", q.c + 1)));
            }
            if !q.t.is_finite() {
                return Err(bad("non-finite query time".into()));
            }
        }
        if self.targets.iter().any(|y| !y.is_finite()) {
            return Err(bad("non-finite target".into()));
        }
        Ok(())
    }

    /// Copy with the queries (and targets) at `drop` removed.
    pub fn without_queries(&self, drop: &[usize]) -> SeriesInstance {
        let mut keep = vec![true; self.queries.len()];
        for &d in drop {
            keep[d] = false;
        }
        let mut out = self.clone();
        out.queries = Vec::new();
        out.targets = Vec::new();
        for (i, k) in keep.into_iter().enumerate() {
            if k {
                out.queries.push(self.queries[i]);
                out.targets.push(self.targets[i]);
            }
        }
        out
    }
}

/// On-disk record; channels are 1-based.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    series_id: String,
    channels: usize,
    observations: Vec<(f64, usize, f64)>,
    queries: Vec<(f64, usize)>,
    targets: Vec<f64>,
}

impl Record {
    fn into_instance(self) -> std::result::Result<SeriesInstance, String> {
        let chan = |c: usize| -> std::result::Result<usize, String> {
            if c == 0 || c > self.channels {
                Err(format!("channel {c} out of range 1..={}", self.channels))
            } else {
                Ok(c - 1)
            }
        };
        let observations = self
            .observations
            .iter()
            .map(|&(t, c, y)| Ok(Observation { t, c: chan(c)?, y }))
            .collect::<std::result::Result<_, String>>()?;
        let queries = self
            .queries
            .iter()
            .map(|&(t, c)| Ok(Query { t, c: chan(c)? }))
            .collect::<std::result::Result<_, String>>()?;
        Ok(SeriesInstance {
            series_id: self.series_id,
            channels: self.channels,
            observations,
            queries,
            targets: self.targets,
        })
    }

    fn from_instance(inst: &SeriesInstance) -> Self {
        Record {
            series_id: inst.series_id.clone(),
            channels: inst.channels,
            observations: inst.observations.iter().map(|o| (o.t, o.c + 1, o.y)).collect(),
            queries: inst.queries.iter().map(|q| (q.t, q.c + 1)).collect(),
            targets: inst.targets.clone(),
        }
    }
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<SeriesInstance>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CoreError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let id = record.series_id.clone();
        let inst = record.into_instance().map_err(|reason| CoreError::InvalidRecord {
            series_id: id,
            reason,
        })?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<SeriesInstance>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    parse_jsonl(BufReader::new(file))
}

pub fn write_jsonl(path: impl AsRef<Path>, instances: &[SeriesInstance]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, &Record::from_instance(inst))?;
        w.write_all(b"\n").map_err(|e| CoreError::io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Per-channel standardization plus the affine time rescaling, fitted on the
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
}

pub const STD_FLOOR: f64 = 1e-8;

impl ChannelStats {
    pub fn fit(train: &[SeriesInstance]) -> Result<Self> {
        let channels = train.first().ok_or(CoreError::EmptyTrainingSet)?.channels;
        let mut sum = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        let mut t_min = f64::INFINITY;
        let mut t_max = f64::NEG_INFINITY;
        let values = |inst: &SeriesInstance| {
            let obs = inst.observations.iter().map(|o| (o.t, o.c, o.y));
            let qry = inst.queries.iter().zip(&inst.targets).map(|(q, &y)| (q.t, q.c, y));
            obs.chain(qry).collect::<Vec<_>>()
        };
        for inst in train {
            if inst.channels != channels {
                return Err(CoreError::InvalidRecord {
                    series_id: inst.series_id.clone(),
                    reason: format!("{} channels, expected {channels}", inst.channels),
                });
            }
            for (t, c, y) in values(inst) {
                sum[c] += y;
                count[c] += 1;
                t_min = t_min.min(t);
                t_max = t_max.max(t);
            }
        }
        let mean: Vec<f64> = (0..channels)
            .map(|c| if count[c] > 0 { sum[c] / count[c] as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; channels];
        for inst in train {
            for (_, c, y) in values(inst) {
                sq[c] += (y - mean[c]) * (y - mean[c]);
            }
        }
        let std = (0..channels)
            .map(|c| {
                if count[c] == 0 {
                    log::warn!("channel {} never observed in training split; using mean 0, std 1", c + 1);
                    1.0
                } else {
                    (sq[c] / count[c] as f64).sqrt().max(STD_FLOOR)
                }
            })
            .collect();
        if !t_min.is_finite() {
            t_min = 0.0;
            t_max = 1.0;
        }
        Ok(Self {
            mean,
            std,
            t_min,
            t_max,
        })
    }

    fn t_scale(&self) -> f64 {
        let span = self.t_max - self.t_min;
        if span > 0.0 {
            span
        } else {
            1.0
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, inst: &SeriesInstance) -> SeriesInstance {
        let ts = self.t_scale();
        let mut out = inst.clone();
        for o in &mut out.observations {
            o.t = (o.t - self.t_min) / ts;
            o.y = (o.y - self.mean[o.c]) / self.std[o.c];
        }
        for (q, y) in out.queries.iter_mut().zip(&mut out.targets) {
            q.t = (q.t - self.t_min) / ts;
            *y = (*y - self.mean[q.c]) / self.std[q.c];
        }
        out
    }

    pub fn denormalize_value(&self, c: usize, y: f64) -> f64 {
        y * self.std[c] + self.mean[c]
    }

    pub fn denormalize_time(&self, t: f64) -> f64 {
        t * self.t_scale() + self.t_min
    }

    pub fn denormalize(&self, inst: &SeriesInstance) -> SeriesInstance {
        let mut out = inst.clone();
        for o in &mut out.observations {
            o.t = self.denormalize_time(o.t);
            o.y = self.denormalize_value(o.c, o.y);
        }
        for (q, y) in out.queries.iter_mut().zip(&mut out.targets) {
            q.t = self.denormalize_time(q.t);
            *y = self.denormalize_value(q.c, *y);
        }
        out
    }
}

/// Fits statistics on `train` and standardizes every given split with them.
pub fn fit_and_apply_normalization(
    train: &[SeriesInstance],
    others: &[&[SeriesInstance]],
) -> Result<(Vec<SeriesInstance>, Vec<Vec<SeriesInstance>>, ChannelStats)> {
    let stats = ChannelStats::fit(train)?;
    let t = train.iter().map(|i| stats.apply(i)).collect();
    let o = others
        .iter()
        .map(|split| split.iter().map(|i| stats.apply(i)).collect())
        .collect();
    Ok((t, o, stats))
}

/// Split sizes for `n` instances under percentage ratios; the last split
/// takes the remainder.
pub fn split_sizes(n: usize, ratios: [usize; 3]) -> Result<[usize; 3]> {
    if ratios.iter().sum::<usize>() != 100 {
        return Err(CoreError::Config(format!("split ratios {ratios:?} do not sum to 100")));
    }
    if n < 3 {
        return Err(CoreError::TooFewInstances { needed: 3, got: n });
    }
    let a = ((n * ratios[0]) as f64 / 100.0).round() as usize;
    let b = ((n * ratios[1]) as f64 / 100.0).round() as usize;
    let a = a.clamp(1, n - 2);
    let b = b.clamp(1, n - a - 1);
    Ok([a, b, n - a - b])
}

/// Seeded shuffle into train/val/test.
pub fn split(
    instances: Vec<SeriesInstance>,
    ratios: [usize; 3],
    seed: u64,
) -> Result<(Vec<SeriesInstance>, Vec<SeriesInstance>, Vec<SeriesInstance>)> {
    let sizes = split_sizes(instances.len(), ratios)?;
    let mut idx: Vec<usize> = (0..instances.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<SeriesInstance>> = instances.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<SeriesInstance> {
        idx[range].iter().map(|&i| slots[i].take().expect("index used once")).collect()
    };
    let train = take(0..sizes[0]);
    let val = take(sizes[0]..sizes[0] + sizes[1]);
    let test = take(sizes[0] + sizes[1]..idx.len());
    Ok((train, val, test))
}

/// Padded batch of instances. Padded slots hold zeros and mask 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub channels: usize,
    pub series_ids: Vec<String>,
    pub obs_t: Vec<Vec<f64>>,
    pub obs_c: Vec<Vec<usize>>,
    pub obs_y: Vec<Vec<f64>>,
    pub obs_mask: Vec<Vec<bool>>,
    pub qry_t: Vec<Vec<f64>>,
    pub qry_c: Vec<Vec<usize>>,
    pub qry_mask: Vec<Vec<bool>>,
    pub targets: Vec<Vec<f64>>,
    pub n_obs: Vec<usize>,
    pub n_qry: Vec<usize>,
}

pub fn collate(instances: &[SeriesInstance], max_obs: usize, max_qry: usize) -> Result<Batch> {
    let channels = instances.first().map_or(0, |i| i.channels);
    let mut b = Batch {
        channels,
        series_ids: Vec::new(),
        obs_t: Vec::new(),
        obs_c: Vec::new(),
        obs_y: Vec::new(),
        obs_mask: Vec::new(),
        qry_t: Vec::new(),
        qry_c: Vec::new(),
        qry_mask: Vec::new(),
        targets: Vec::new(),
        n_obs: Vec::new(),
        n_qry: Vec::new(),
    };
    for (i, inst) in instances.iter().enumerate() {
        let (no, nq) = (inst.observations.len(), inst.queries.len());
        if no > max_obs {
            return Err(CoreError::CapExceeded {
                instance: i,
                what: "observation",
                count: no,
                cap: max_obs,
            });
        }
        if nq > max_qry {
            return Err(CoreError::CapExceeded {
                instance: i,
                what: "query",
                count: nq,
                cap: max_qry,
            });
        }
        let pad = |mut v: Vec<f64>, n: usize| {
            v.resize(n, 0.0);
            v
        };
        b.series_ids.push(inst.series_id.clone());
        b.obs_t.push(pad(inst.observations.iter().map(|o| o.t).collect(), max_obs));
        b.obs_y.push(pad(inst.observations.iter().map(|o| o.y).collect(), max_obs));
        let mut oc: Vec<usize> = inst.observations.iter().map(|o| o.c).collect();
        oc.resize(max_obs, 0);
        b.obs_c.push(oc);
        b.obs_mask.push((0..max_obs).map(|j| j < no).collect());
        b.qry_t.push(pad(inst.queries.iter().map(|q| q.t).collect(), max_qry));
        let mut qc: Vec<usize> = inst.queries.iter().map(|q| q.c).collect();
        qc.resize(max_qry, 0);
        b.qry_c.push(qc);
        b.qry_mask.push((0..max_qry).map(|j| j < nq).collect());
        b.targets.push(pad(inst.targets.clone(), max_qry));
        b.n_obs.push(no);
        b.n_qry.push(nq);
    }
    Ok(b)
}

impl Batch {
    pub fn len(&self) -> usize {
        self.series_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series_ids.is_empty()
    }

    /// Rebuilds instance `i` from its unmasked slots only.
    pub fn instance(&self, i: usize) -> SeriesInstance {
        let observations = (0..self.obs_mask[i].len())
            .filter(|&j| self.obs_mask[i][j])
            .map(|j| Observation {
                t: self.obs_t[i][j],
                c: self.obs_c[i][j],
                y: self.obs_y[i][j],
            })
            .collect();
        let qidx: Vec<usize> = (0..self.qry_mask[i].len()).filter(|&j| self.qry_mask[i][j]).collect();
        SeriesInstance {
            series_id: self.series_ids[i].clone(),
            channels: self.channels,
            observations,
            queries: qidx
                .iter()
                .map(|&j| Query {
                    t: self.qry_t[i][j],
                    c: self.qry_c[i][j],
                })
                .collect(),
            targets: qidx.iter().map(|&j| self.targets[i][j]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, obs: &[(f64, usize, f64)], qry: &[(f64, usize)], y: &[f64]) -> SeriesInstance {
        SeriesInstance {
            series_id: id.into(),
            channels: 2,
            observations: obs.iter().map(|&(t, c, y)| Observation { t, c, y }).collect(),
            queries: qry.iter().map(|&(t, c)| Query { t, c }).collect(),
            targets: y.to_vec(),
        }
    }

    #[test]
    fn parse_examples() {
        assert!(parse_jsonl("".as_bytes()).unwrap().is_empty());
        let one = r#"{"series_id":"a","channels":2,"observations":[[0.0,1,1.5],[1.0,2,-0.5]],"queries":[[2.0,1]],"targets":[0.25]}"#;
        let got = parse_jsonl(one.as_bytes()).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].queries.len(), 1);
        assert_eq!(got[0].observations[1].c, 1);

        let bad = r#"{"series_id":"oops","channels":2,"observations":[],"queries":[[2.0,1]],"targets":[]}"#;
        let err = parse_jsonl(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("oops"), "{err}");

        let chan = r#"{"series_id":"c","channels":2,"observations":[[0.0,3,1.0]],"queries":[],"targets":[]}"#;
        assert!(matches!(
            parse_jsonl(chan.as_bytes()),
            Err(CoreError::InvalidRecord { .. })
        ));
        let two = format!("{one}\nnot json");
        assert!(matches!(
            parse_jsonl(two.as_bytes()),
            Err(CoreError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn normalization_examples() {
        let train = vec![inst("a", &[(0.0, 0, 3.0), (4.0, 0, 7.0), (2.0, 1, 1.0)], &[(1.0, 1)], &[1.0])];
        let stats = ChannelStats::fit(&train).unwrap();
        assert_eq!(stats.mean[0], 5.0);
        assert_eq!(stats.std[0], 2.0);
        assert_eq!(stats.std[1], STD_FLOOR);
        let other = inst("b", &[(2.0, 0, 9.0)], &[(4.0, 1)], &[1.0]);
        let z = stats.apply(&other);
        assert_eq!(z.observations[0].y, 2.0);
        assert_eq!(z.observations[0].t, 0.5);
        assert_eq!(z.targets[0], 0.0);
        assert_eq!(z.queries[0].t, 1.0);
        let back = stats.denormalize(&z);
        assert!((back.observations[0].y - 9.0).abs() < 1e-12);
    }

    #[test]
    fn standardized_data_is_fixed_point() {
        let train = vec![
            inst("a", &[(0.0, 0, -1.0), (1.0, 1, 1.0)], &[(0.5, 0)], &[1.0]),
            inst("b", &[(0.2, 0, -1.0), (0.4, 1, -1.0)], &[(1.0, 0)], &[1.0]),
        ];
        let stats = ChannelStats::fit(&train).unwrap();
        assert!(stats.mean.iter().all(|m| m.abs() < 1e-15));
        assert!(stats.std.iter().all(|s| (s - 1.0).abs() < 1e-15));
        for i in &train {
            let z = stats.apply(i);
            for (a, b) in z.targets.iter().zip(&i.targets) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_sizes(10, [70, 10, 20]).unwrap(), [7, 1, 2]);
        assert_eq!(split_sizes(10000, [70, 10, 20]).unwrap(), [7000, 1000, 2000]);
        assert!(split_sizes(2, [70, 10, 20]).is_err());
        let data: Vec<_> = (0..10).map(|i| inst(&i.to_string(), &[], &[], &[])).collect();
        let (a, b, c) = split(data.clone(), [70, 10, 20], 3).unwrap();
        let (a2, b2, c2) = split(data, [70, 10, 20], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        assert_eq!((&a, &b, &c), (&a2, &b2, &c2));
        let mut ids: Vec<String> = a.iter().chain(&b).chain(&c).map(|i| i.series_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn collate_examples() {
        let a = inst("a", &[(0.0, 0, 1.0)], &[(1.0, 0), (2.0, 1), (3.0, 0)], &[1.0, 2.0, 3.0]);
        let b = inst("b", &[], &[(1.0, 0); 5], &[0.5; 5]);
        let batch = collate(&[a.clone()], 1, 3).unwrap();
        assert!(batch.obs_mask[0].iter().all(|&m| m));
        assert!(batch.qry_mask[0].iter().all(|&m| m));
        let batch = collate(&[a.clone(), b.clone()], 2, 5).unwrap();
        assert_eq!(batch.qry_mask[0].iter().filter(|&&m| m).count(), 3);
        assert_eq!(batch.targets[0][4], 0.0);
        assert_eq!(batch.instance(0), a);
        assert_eq!(batch.instance(1), b);
        assert!(matches!(
            collate(&[a, b], 2, 4),
            Err(CoreError::CapExceeded { instance: 1, .. })
        ));
    }
}
