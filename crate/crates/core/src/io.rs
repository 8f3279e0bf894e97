//! File formats: JSON configs and reports, CSV trajectories with `#` header
//! comments, and the small argument grammars used on the command line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::chain::{ChainConfig, ChainModel};
use crate::diffusion::{AbsorptionRecord, DiffusionPath};
use crate::error::{Error, Result};
use crate::harness::{Ensemble, EnsembleKind};
use crate::sites::SiteSet;
use crate::zrp::ZrpPath;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_chain(path: &Path) -> Result<ChainModel> {
    read_json::<ChainConfig>(path)?.build()
}

/// Comma-separated numbers.
pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Invalid(format!("not a number: {t:?}"))))
        .collect()
}

/// `start:step:end` (inclusive, `end - start` a whole number of steps) or a
/// comma-separated list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [_] => parse_f64_list(s),
        [a, h, b] => {
            let nums = parse_f64_list(&format!("{a},{h},{b}"))?;
            let (start, step, end) = (nums[0], nums[1], nums[2]);
            if !(step > 0.0) || !(end >= start) {
                return Err(Error::Invalid(format!("bad grid {s:?}")));
            }
            let count = ((end - start) / step).round();
            if (start + count * step - end).abs() > 1e-9 * end.abs().max(1.0) {
                return Err(Error::Invalid(format!("grid {s:?}: range is not a multiple of the step")));
            }
            let count = count as usize;
            Ok((0..=count).map(|k| if k == count { end } else { start + k as f64 * step }).collect())
        }
        _ => Err(Error::Invalid(format!("bad grid {s:?}"))),
    }
}

/// `key=value` pairs from the leading `#` lines of a CSV file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvMeta(pub Vec<(String, String)>);

impl CsvMeta {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .ok_or_else(|| Error::Invalid(format!("missing header field {key}")))?
            .parse()
            .map_err(|_| Error::Invalid(format!("bad header field {key}")))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?))
}

fn write_meta(out: &mut impl Write, meta: &[(&str, String)]) -> Result<()> {
    for (k, v) in meta {
        writeln!(out, "# {k}={v}")?;
    }
    Ok(())
}

fn coord_header(first: &[&str], p: usize, last: &[&str]) -> Vec<String> {
    first
        .iter()
        .map(|s| s.to_string())
        .chain((1..=p).map(|i| format!("x_{i}")))
        .chain(last.iter().map(|s| s.to_string()))
        .collect()
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// `replica,time,x_1..x_p`.
pub fn write_zrp_csv(path: &Path, paths: &[ZrpPath], meta: &[(&str, String)]) -> Result<()> {
    let mut out = create(path)?;
    write_meta(&mut out, meta)?;
    let p = paths.first().map_or(0, |r| r.points[0].len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(coord_header(&["replica", "time"], p, &[]))?;
    for path in paths {
        for (t, x) in path.sample_times.iter().zip(&path.points) {
            let row = [path.replica.to_string(), fmt(*t)].into_iter().chain(x.iter().map(|v| fmt(*v)));
            w.write_record(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `replica,time,x_1..x_p,face` with the face as a bitmask (bit `i-1` for site `i`).
pub fn write_diffusion_csv(path: &Path, paths: &[DiffusionPath], meta: &[(&str, String)]) -> Result<()> {
    let mut out = create(path)?;
    write_meta(&mut out, meta)?;
    let p = paths.first().map_or(0, |r| r.points[0].len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(coord_header(&["replica", "time"], p, &["face"]))?;
    for path in paths {
        for (t, x) in path.sample_times.iter().zip(&path.points) {
            let row = [path.replica.to_string(), fmt(*t)]
                .into_iter()
                .chain(x.iter().map(|v| fmt(*v)))
                .chain(std::iter::once(SiteSet::support(x).bits().to_string()));
            w.write_record(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `replica,n,sigma_n,face`; row `n = 0` is the start face at time 0.
pub fn write_absorptions_csv(path: &Path, paths: &[DiffusionPath], meta: &[(&str, String)]) -> Result<()> {
    let mut out = create(path)?;
    write_meta(&mut out, meta)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["replica", "n", "sigma_n", "face"])?;
    for path in paths {
        for (n, (s, f)) in path.record.sigmas.iter().zip(&path.record.faces).enumerate() {
            w.write_record([path.replica.to_string(), n.to_string(), fmt(*s), f.bits().to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Splits a file into its `#` header and a CSV reader over the rest.
fn open_csv(path: &Path) -> Result<(CsvMeta, csv::Reader<std::io::Cursor<Vec<u8>>>)> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut meta = Vec::new();
    let mut body = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
        } else {
            body.extend_from_slice(line.as_bytes());
            body.push(b'\n');
        }
    }
    Ok((CsvMeta(meta), csv::Reader::from_reader(std::io::Cursor::new(body))))
}

fn parse_cell<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Invalid(format!("bad CSV cell in column {}", i + 1)))
}

/// Reads a trajectory file written by [`write_zrp_csv`] or [`write_diffusion_csv`].
pub fn read_ensemble_csv(path: &Path) -> Result<Ensemble> {
    let (meta, mut rdr) = open_csv(path)?;
    let kind = match meta.get("kind") {
        Some("zrp") => EnsembleKind::Zrp,
        Some("diffusion") => EnsembleKind::Diffusion,
        _ => return Err(Error::Invalid(format!("{}: header lacks kind=zrp|diffusion", path.display()))),
    };
    let header = rdr.headers()?.clone();
    let p = header.iter().filter(|h| h.starts_with("x_")).count();
    let mut paths: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut times: Vec<Vec<f64>> = Vec::new();
    let mut current: Option<u64> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let replica: u64 = parse_cell(&rec, 0)?;
        if current != Some(replica) {
            current = Some(replica);
            paths.push(Vec::new());
            times.push(Vec::new());
        }
        times.last_mut().unwrap().push(parse_cell(&rec, 1)?);
        let x: Vec<f64> = (0..p).map(|i| parse_cell(&rec, 2 + i)).collect::<Result<_>>()?;
        paths.last_mut().unwrap().push(x);
    }
    let first = times.first().cloned().ok_or(Error::TooFewReplicas { got: 0, need: 1 })?;
    if times.iter().any(|t| *t != first) {
        return Err(Error::MismatchedCheckpoints);
    }
    Ok(Ensemble {
        kind,
        n: if kind == EnsembleKind::Zrp { Some(meta.parsed("n")?) } else { None },
        seed: meta.parsed("seed")?,
        times: first,
        paths,
    })
}

/// Reads records written by [`write_absorptions_csv`].
pub fn read_absorptions_csv(path: &Path) -> Result<Vec<AbsorptionRecord>> {
    let (_, mut rdr) = open_csv(path)?;
    let mut out: Vec<AbsorptionRecord> = Vec::new();
    let mut current: Option<u64> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let replica: u64 = parse_cell(&rec, 0)?;
        let sigma: f64 = parse_cell(&rec, 2)?;
        let face = SiteSet::from_bits(parse_cell(&rec, 3)?);
        if current != Some(replica) {
            current = Some(replica);
            out.push(AbsorptionRecord { sigmas: Vec::new(), faces: Vec::new(), terminal: None });
        }
        let r = out.last_mut().unwrap();
        r.sigmas.push(sigma);
        r.faces.push(face);
    }
    for r in &mut out {
        let last = *r.faces.last().unwrap();
        r.terminal = (last.len() == 1).then(|| last.iter().next().unwrap());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let g = parse_grid("0:0.25:1").unwrap();
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = parse_grid("0:0.01:1").unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert_eq!(parse_grid("0.1,0.5").unwrap(), vec![0.1, 0.5]);
        assert!(parse_grid("0:0.3:1").is_err());
        assert!(parse_grid("0:-1:1").is_err());
        assert!(parse_grid("a,b").is_err());
    }
}
