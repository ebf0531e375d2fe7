use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::ChainResult;
use crate::error::{Error, Result};

/// JSON sidecar written next to a chain dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub seed: u64,
    pub chain: u64,
    pub n_warmup: usize,
    pub n_samples: usize,
    pub divergences: usize,
    pub step_size_final: f64,
    pub mean_accept: f64,
    pub n_evals: usize,
    pub warmup_seconds: f64,
    pub sampling_seconds: f64,
}

/// One row per draw: `sample_id, log_density, accept_stat, theta_0, ...`.
pub fn write_chain_csv<W: Write>(out: W, chain: &ChainResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample_id".to_string(), "log_density".into(), "accept_stat".into()];
    header.extend((0..chain.dim()).map(|d| format!("theta_{d}")));
    w.write_record(&header)?;
    for (i, row) in chain.samples.iter().enumerate() {
        let mut rec = vec![i.to_string(), chain.log_densities[i].to_string(), chain.accept_stats[i].to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the draws back from [`write_chain_csv`] output.
pub fn read_chain_csv<R: Read>(input: R) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(3)
            .map(|f| f.parse::<f64>().map_err(|e| Error::Config(format!("bad number `{f}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Long format `(eval_point_id, sample_id, value)` for auxiliary draws.
pub fn write_aux_csv<W: Write>(out: W, aux: &[Vec<f64>], value_name: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["eval_point_id", "sample_id", value_name])?;
    for (sample, row) in aux.iter().enumerate() {
        for (point, v) in row.iter().enumerate() {
            w.write_record([point.to_string(), sample.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let chain = ChainResult {
            samples: vec![vec![0.1, -2.5e-17], vec![1.0 / 3.0, 7.0]],
            log_densities: vec![-1.0, -2.0],
            accept_stats: vec![0.5, 1.0],
            ..ChainResult::default()
        };
        let mut buf = Vec::new();
        write_chain_csv(&mut buf, &chain).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_id,log_density,accept_stat,theta_0,theta_1\n"));
        assert_eq!(read_chain_csv(&buf[..]).unwrap(), chain.samples);
    }

    #[test]
    fn aux_long_format() {
        let mut buf = Vec::new();
        write_aux_csv(&mut buf, &[vec![1.0, 2.0], vec![3.0, 4.0]], "reward").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().nth(3).unwrap(), "0,1,3");
    }
}
