//! Classification error and the error-versus-sensing-rate sweep.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Network;
use crate::mnist::Dataset;
use crate::model::{ModelKind, SensingConfig};
use crate::tensor::{argmax, Tensor};
use crate::train::{self, EpochReport, TrainConfig, TrainOptions, TrainState};

/// Samples per inference batch in [`error_rate`].
const EVAL_CHUNK: usize = 500;

/// Predicted class: argmax of the network output, lowest index on ties.
pub fn classify(net: &Network, x: &Tensor) -> Result<usize> {
    Ok(net.infer(x)?.argmax())
}

/// Predicted class for every sample, in dataset order.
pub fn predictions(net: &Network, ds: &Dataset) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<Vec<usize>> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|c| {
            let (x, _) = ds.gather(c);
            let out = net.infer(&x)?;
            Ok((0..c.len()).map(|i| argmax(out.row(i))).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Percentage of misclassified samples, `100 * wrong / n`.
pub fn error_rate(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot compute an error rate on an empty dataset".into()));
    }
    let wrong = predictions(net, ds)?
        .iter()
        .zip(&ds.labels)
        .filter(|(&p, &l)| p != l as usize)
        .count();
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}

/// One row of the published comparison table (errors in percent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub rate: f64,
    pub measurements: usize,
    pub smashed_filters: f64,
    pub random_sensing_cnn: f64,
    pub proposed: f64,
}

/// Published MNIST test errors at the four sensing rates.
pub fn reference_table() -> Vec<ReferenceRow> {
    [
        (0.25, 196, 27.42, 1.63, 1.56),
        (0.1, 78, 43.55, 2.99, 1.91),
        (0.05, 39, 53.21, 5.18, 2.86),
        (0.01, 8, 63.03, 41.06, 6.46),
    ]
    .into_iter()
    .map(|(rate, measurements, smashed_filters, random_sensing_cnn, proposed)| ReferenceRow {
        rate,
        measurements,
        smashed_filters,
        random_sensing_cnn,
        proposed,
    })
    .collect()
}

pub const REFERENCE_RATES: [f64; 4] = [0.25, 0.1, 0.05, 0.01];

/// One `(rate, kind)` result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub rate: f64,
    pub measurements: usize,
    pub kind: ModelKind,
    pub error_percent: f64,
    pub n_test: usize,
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool: String,
    pub version: String,
    pub train_config: TrainConfig,
    pub n_train: usize,
    pub reference: Vec<ReferenceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub records: Vec<SweepRecord>,
}

impl EvalReport {
    pub fn new(train_config: TrainConfig, n_train: usize) -> Self {
        EvalReport {
            metadata: ReportMetadata {
                tool: env!("CARGO_PKG_NAME").to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                train_config,
                n_train,
                reference: reference_table(),
            },
            records: Vec::new(),
        }
    }

    /// CSV with header `rate,measurements,kind,error_percent,n_test,seed,epochs`.
    pub fn write_csv_to(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.records.is_empty() {
            w.write_record(["rate", "measurements", "kind", "error_percent", "n_test", "seed", "epochs"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv_to(std::fs::File::create(path)?)
    }

    pub fn records_from_csv(input: impl Read) -> Result<Vec<SweepRecord>> {
        let mut r = csv::Reader::from_reader(input);
        Ok(r.deserialize().collect::<std::result::Result<Vec<SweepRecord>, _>>()?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}

/// Progress events emitted by [`sweep`].
pub enum SweepEvent<'a> {
    Started { rate: f64, kind: ModelKind, cfg: SensingConfig },
    Epoch { rate: f64, kind: ModelKind, report: &'a EpochReport },
    Finished(&'a SweepRecord),
}

/// Builds, trains and evaluates every `(rate, kind)` pair in order.
pub fn sweep(
    rates: &[f64],
    kinds: &[ModelKind],
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut progress: impl FnMut(SweepEvent),
) -> Result<EvalReport> {
    if rates.is_empty() || kinds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one rate and one kind".into()));
    }
    let mut report = EvalReport::new(cfg.clone(), train_set.len());
    for &rate in rates {
        let sensing = SensingConfig::new(train_set.signal_len(), rate)?;
        for &kind in kinds {
            progress(SweepEvent::Started { rate, kind, cfg: sensing });
            let mut net = kind.build(sensing, cfg.seed)?;
            train::train_from(&mut net, TrainState::new(cfg.seed), train_set, cfg, &TrainOptions::default(), |r| {
                progress(SweepEvent::Epoch { rate, kind, report: r })
            })?;
            let record = SweepRecord {
                rate,
                measurements: sensing.m,
                kind,
                error_percent: error_rate(&net, test_set)?,
                n_test: test_set.len(),
                seed: cfg.seed,
                epochs: cfg.epochs,
            };
            progress(SweepEvent::Finished(&record));
            report.records.push(record);
        }
    }
    Ok(report)
}

/// Parses a comma-separated rate list, each in `(0, 1]`.
pub fn parse_rates(s: &str) -> Result<Vec<f64>> {
    let rates = s
        .split(',')
        .map(|t| {
            let r: f64 = t.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad sensing rate '{}'", t.trim())))?;
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidArgument(format!("sensing rate {r} outside (0, 1]")));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    if rates.is_empty() {
        return Err(Error::InvalidArgument("empty rate list".into()));
    }
    Ok(rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{FullyConnected, Layer};
    use crate::mnist::Split;

    fn const_net(class: usize) -> Network {
        let mut fc = FullyConnected::zeroed(4, 10, true);
        fc.bias.as_mut().unwrap().data_mut()[class] = 1.0;
        Network::new(&[4], vec![Layer::FullyConnected(fc)]).unwrap()
    }

    fn balanced(n: usize) -> Dataset {
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new(Tensor::zeros(&[n, 4]), labels, Split::Test).unwrap()
    }

    #[test]
    fn classify_rules() {
        let mut net = const_net(9);
        assert_eq!(classify(&net, &Tensor::zeros(&[4])).unwrap(), 9);
        if let Layer::FullyConnected(fc) = &mut net.layers_mut()[0] {
            fc.bias.as_mut().unwrap().fill(0.0);
        }
        assert_eq!(classify(&net, &Tensor::zeros(&[4])).unwrap(), 0);
    }

    #[test]
    fn constant_predictor_is_ninety_percent() {
        let ds = balanced(100);
        assert_eq!(error_rate(&const_net(3), &ds).unwrap(), 90.0);
    }

    #[test]
    fn empty_dataset_errors() {
        let ds = balanced(10);
        let empty = Dataset { images: ds.images.clone(), labels: vec![], split: Split::Test };
        assert!(error_rate(&const_net(0), &empty).is_err());
    }

    #[test]
    fn rate_parsing() {
        assert_eq!(parse_rates("0.25, 0.1,0.05,0.01").unwrap(), REFERENCE_RATES.to_vec());
        assert!(parse_rates("0.25,1.5").is_err());
        assert!(parse_rates("abc").is_err());
        assert!(parse_rates("0").is_err());
    }

    #[test]
    fn csv_header_and_round_trip() {
        let mut report = EvalReport::new(TrainConfig::default(), 60_000);
        report.records.push(SweepRecord {
            rate: 0.01,
            measurements: 8,
            kind: ModelKind::Baseline,
            error_percent: 41.06,
            n_test: 10_000,
            seed: 7,
            epochs: 100,
        });
        let csv = report.to_csv_string().unwrap();
        assert!(csv.starts_with("rate,measurements,kind,error_percent,n_test,seed,epochs\n"));
        assert!(csv.contains("0.01,8,baseline,41.06,10000,7,100"));
        assert_eq!(EvalReport::records_from_csv(csv.as_bytes()).unwrap(), report.records);
    }
}
