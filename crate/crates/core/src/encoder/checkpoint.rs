//! Two-stage model container and its on-disk format.
//!
//! Layout: a text header of `key=value` lines opened by the magic line and
//! closed by `end`, followed by little-endian f64 payload in this order:
//! mention table, entity table, ranker weights, ranker bias.

use std::path::Path;

use super::{BiEncoderParams, CrossRankerParams, EncoderFlags, NUM_CROSS_FEATURES};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kb::Buckets;

const MAGIC: &str = "metalink-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct LinkingModel {
    pub flags: EncoderFlags,
    pub bi: BiEncoderParams,
    pub cross: CrossRankerParams,
}

impl LinkingModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{MAGIC}\ndim={}\nnum_buckets={}\npaper_exact_loss={}\nnormalize_embeddings={}\ncross_features={}\nend\n",
            self.bi.dim(),
            self.bi.buckets().get(),
            self.flags.paper_exact_loss,
            self.flags.normalize_embeddings,
            NUM_CROSS_FEATURES,
        );
        let floats = self.bi.mention_table().len() * 2 + NUM_CROSS_FEATURES + 1;
        let mut out = Vec::with_capacity(header.len() + floats * 8);
        out.extend_from_slice(header.as_bytes());
        let payload = self
            .bi
            .mention_table()
            .iter()
            .chain(self.bi.entity_table())
            .chain(&self.cross.weights)
            .chain(std::iter::once(&self.cross.bias));
        for x in payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not utf-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("missing magic line"));
        }
        let (mut dim, mut buckets, mut exact, mut normalize, mut ncross) = (None, None, None, None, None);
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad("header line without '='"))?;
            let parse_err = |_| Error::Checkpoint(format!("bad value for {k}: {v:?}"));
            match k {
                "dim" => dim = Some(v.parse::<usize>().map_err(|e| parse_err(e.to_string()))?),
                "num_buckets" => buckets = Some(v.parse::<u64>().map_err(|e| parse_err(e.to_string()))?),
                "paper_exact_loss" => exact = Some(v.parse::<bool>().map_err(|e| parse_err(e.to_string()))?),
                "normalize_embeddings" => normalize = Some(v.parse::<bool>().map_err(|e| parse_err(e.to_string()))?),
                "cross_features" => ncross = Some(v.parse::<usize>().map_err(|e| parse_err(e.to_string()))?),
                other => return Err(Error::Checkpoint(format!("unknown header key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::Checkpoint(format!("header is missing {k}"));
        let dim = dim.ok_or_else(|| missing("dim"))?;
        let buckets = Buckets::new(buckets.ok_or_else(|| missing("num_buckets"))?)?;
        if ncross.ok_or_else(|| missing("cross_features"))? != NUM_CROSS_FEATURES {
            return Err(bad("unsupported ranker feature count"));
        }
        let flags = EncoderFlags {
            paper_exact_loss: exact.ok_or_else(|| missing("paper_exact_loss"))?,
            normalize_embeddings: normalize.ok_or_else(|| missing("normalize_embeddings"))?,
        };

        let table = dim * buckets.get() as usize;
        let payload = &bytes[pos..];
        if payload.len() != (2 * table + NUM_CROSS_FEATURES + 1) * 8 {
            return Err(bad("payload length does not match header"));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mention: Vec<f64> = floats.by_ref().take(table).collect();
        let entity: Vec<f64> = floats.by_ref().take(table).collect();
        let mut cross = CrossRankerParams::default();
        for w in cross.weights.iter_mut() {
            *w = floats.next().expect("length checked");
        }
        cross.bias = floats.next().expect("length checked");
        if !cross.is_finite() {
            return Err(bad("non-finite ranker weight"));
        }
        Ok(LinkingModel {
            flags,
            bi: BiEncoderParams::from_tables(dim, buckets, mention, entity)?,
            cross,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
