use std::collections::BTreeMap;

use super::{certify_constants, CompressorKind, CompressorSpec, NormIndex};
use crate::seed::{self, label};
use crate::{Error, Result};

const AUTO_RESCALE_TRIALS: usize = 10_000;
const AUTO_RESCALE_SEED: u64 = 0;

fn parse_err(s: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        what: format!("compressor `{s}`"),
        message: message.into(),
    }
}

struct Args<'a> {
    src: &'a str,
    named: BTreeMap<&'a str, &'a str>,
    positional: Vec<&'a str>,
}

impl<'a> Args<'a> {
    fn new(src: &'a str, raw: &'a str) -> Result<Self> {
        let mut named = BTreeMap::new();
        let mut positional = Vec::new();
        for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.split_once('=') {
                Some((k, v)) => {
                    if named.insert(k.trim(), v.trim()).is_some() {
                        return Err(parse_err(src, format!("duplicate key `{}`", k.trim())));
                    }
                }
                None => positional.push(part),
            }
        }
        Ok(Args {
            src,
            named,
            positional,
        })
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        self.named.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<&'a str> {
        self.take(key)
            .ok_or_else(|| parse_err(self.src, format!("missing `{key}=`")))
    }

    fn int<T: std::str::FromStr>(&self, key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| parse_err(self.src, format!("`{key}` must be an integer, got `{v}`")))
    }

    fn k(&mut self) -> Result<usize> {
        let v = match self.take("k") {
            Some(v) => v,
            None if self.positional.len() == 1 => self.positional.remove(0),
            None => return Err(parse_err(self.src, "missing `k`")),
        };
        self.int("k", v)
    }

    fn bits(&mut self) -> Result<u32> {
        let v = self.required("b")?;
        self.int("b", v)
    }

    fn norm(&mut self) -> Result<NormIndex> {
        let v = self.required("q")?;
        if v.eq_ignore_ascii_case("inf") {
            return Ok(NormIndex::Inf);
        }
        v.parse()
            .map(NormIndex::Finite)
            .map_err(|_| parse_err(self.src, format!("`q` must be a number or inf, got `{v}`")))
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.named.keys().next() {
            return Err(parse_err(self.src, format!("unexpected key `{k}`")));
        }
        if let Some(p) = self.positional.first() {
            return Err(parse_err(self.src, format!("unexpected argument `{p}`")));
        }
        Ok(())
    }
}

pub(super) fn parse(s: &str, dim: usize) -> Result<CompressorSpec> {
    let trimmed = s.trim();
    let (name, raw) = trimmed.split_once(':').unwrap_or((trimmed, ""));
    let mut args = Args::new(s, raw)?;
    let name = name.trim().to_ascii_lowercase();
    let spec = match name.as_str() {
        "identity" | "none" => CompressorSpec::new(CompressorKind::Identity, dim)?,
        "topk" | "top-k" => CompressorSpec::new(CompressorKind::TopK { k: args.k()? }, dim)?,
        "randk" | "random-k" => CompressorSpec::new(CompressorKind::RandomK { k: args.k()? }, dim)?,
        "quant" | "q" => {
            let bits = args.bits()?;
            let norm = args.norm()?;
            CompressorSpec::new(CompressorKind::Quantize { bits, norm }, dim)?
        }
        "norm-sign" | "normsign" => {
            CompressorSpec::new(CompressorKind::NormSign { norm: args.norm()? }, dim)?
        }
        "qt" | "qt-rescaled" => {
            let bits = args.bits()?;
            let norm = args.norm()?;
            let k = args.k()?;
            let inner = CompressorSpec::new(CompressorKind::QuantizeSparsify { bits, norm, k }, dim)?;
            if name == "qt" {
                inner
            } else {
                let r = match args.take("r") {
                    Some(v) => v
                        .parse::<f64>()
                        .map_err(|_| parse_err(s, format!("`r` must be a number, got `{v}`")))?,
                    None => {
                        let mut rng = seed::rng_from(AUTO_RESCALE_SEED, &[label::CERTIFY, dim as u64]);
                        certify_constants(&inner, AUTO_RESCALE_TRIALS, &mut rng)?.r
                    }
                };
                inner.rescaled(r)?
            }
        }
        other => return Err(parse_err(s, format!("unknown compressor `{other}`"))),
    };
    args.finish()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_documented_forms() {
        let p = 50;
        let kind = |s: &str| CompressorSpec::parse(s, p).unwrap().kind().clone();
        assert_eq!(kind("identity"), CompressorKind::Identity);
        assert_eq!(kind("topk:10"), CompressorKind::TopK { k: 10 });
        assert_eq!(kind("topk:k=10"), CompressorKind::TopK { k: 10 });
        assert_eq!(
            kind("quant:b=2,q=inf"),
            CompressorKind::Quantize {
                bits: 2,
                norm: NormIndex::Inf
            }
        );
        assert_eq!(
            kind("qt:b=2,q=inf,k=10"),
            CompressorKind::QuantizeSparsify {
                bits: 2,
                norm: NormIndex::Inf,
                k: 10
            }
        );
        assert_eq!(
            kind("norm-sign:q=2"),
            CompressorKind::NormSign {
                norm: NormIndex::Finite(2.0)
            }
        );
        match kind("qt-rescaled:b=2,q=inf,k=10") {
            CompressorKind::Rescaled { r, .. } => assert!(r > 0.0 && r.is_finite()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn display_round_trips() {
        for s in [
            "identity",
            "topk:7",
            "randk:3",
            "quant:b=2,q=inf",
            "norm-sign:q=2",
            "qt:b=2,q=inf,k=10",
            "qt-rescaled:b=2,q=inf,k=10,r=1.25",
        ] {
            let spec = CompressorSpec::parse(s, 40).unwrap();
            assert_eq!(spec.to_string(), s);
            assert_eq!(CompressorSpec::parse(&spec.to_string(), 40).unwrap(), spec);
        }
    }

    #[test]
    fn rejects_garbage() {
        for s in ["", "topk", "topk:x", "quant:b=2", "qt:b=2,q=inf", "zip:3", "topk:3,extra=1", "topk:k=1,k=2"] {
            assert!(CompressorSpec::parse(s, 20).is_err(), "{s} should fail");
        }
    }
}
