use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Algebra;

/// PHM dimensions tried, in order, by [`Backend::Auto`].
pub const AUTO_PHM_CANDIDATES: [usize; 3] = [5, 4, 2];

/// Channels of the raw input images.
pub const INPUT_CHANNELS: usize = 3;

/// Output layer from pooled features to class logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Backend {
    Dense,
    Phm(usize),
    /// Largest entry of [`AUTO_PHM_CANDIDATES`] dividing both widths.
    Auto,
}

impl Backend {
    /// Resolves the PHM dimension for a `d -> k` head; `None` for dense.
    pub fn resolve(self, layer: &str, d: usize, k: usize) -> Result<Option<usize>> {
        match self {
            Backend::Dense => Ok(None),
            Backend::Phm(n) => Ok(Some(n)),
            Backend::Auto => AUTO_PHM_CANDIDATES
                .iter()
                .copied()
                .find(|&n| d.is_multiple_of(n) && k.is_multiple_of(n))
                .map(Some)
                .ok_or_else(|| Error::NoPhmDimension {
                    layer: layer.to_string(),
                    d,
                    k,
                    candidates: AUTO_PHM_CANDIDATES.to_vec(),
                }),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Dense => f.write_str("dense"),
            Backend::Phm(n) => write!(f, "phm:{n}"),
            Backend::Auto => f.write_str("auto"),
        }
    }
}

impl FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Backend::Dense),
            "auto" | "phm" => Ok(Backend::Auto),
            _ => match s.strip_prefix("phm:").map(str::parse::<usize>) {
                Some(Ok(n)) if n >= 1 => Ok(Backend::Phm(n)),
                _ => Err(Error::config("backend", format!("unknown backend `{s}`"))),
            },
        }
    }
}

impl TryFrom<String> for Backend {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Backend> for String {
    fn from(b: Backend) -> String {
        b.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 -> 3x3 -> 1x1 with 4x channel expansion.
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Declarative description of a residual network variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub algebra: Algebra,
    pub backend: Backend,
    pub block: BlockKind,
    /// Blocks per stage.
    pub multipliers: Vec<usize>,
    /// Bottleneck (inner) width of each stage; the stem uses `widths[0]`.
    pub widths: Vec<usize>,
    pub classes: usize,
    pub input_size: usize,
    pub widen: usize,
    /// Learn the PHM structure matrices instead of fixing them.
    pub trainable_signs: bool,
}

impl ArchitectureSpec {
    /// Named preset: `{resnet,rphm,quat,vect,qphm,vphm}{18,26,34,35,50}`.
    pub fn preset(name: &str, classes: usize) -> Result<Self> {
        let split = name
            .find(|c: char| c.is_ascii_digit())
            .ok_or_else(|| unknown_arch(name))?;
        let (family, depth) = name.split_at(split);
        let (algebra, backend) = match family {
            "resnet" => (Algebra::Real, Backend::Dense),
            "rphm" => (Algebra::Real, Backend::Auto),
            "quat" => (Algebra::Quaternion, Backend::Dense),
            "qphm" => (Algebra::Quaternion, Backend::Auto),
            "vect" => (Algebra::Vectormap(3), Backend::Dense),
            "vphm" => (Algebra::Vectormap(3), Backend::Auto),
            _ => return Err(unknown_arch(name)),
        };
        let (block, multipliers) = match depth {
            "18" => (BlockKind::Basic, vec![2, 2, 2, 2]),
            "34" => (BlockKind::Basic, vec![3, 4, 6, 3]),
            "26" => (BlockKind::Bottleneck, vec![1, 2, 4, 1]),
            "35" => (BlockKind::Bottleneck, vec![2, 3, 4, 2]),
            "50" => (BlockKind::Bottleneck, vec![3, 4, 6, 3]),
            _ => return Err(unknown_arch(name)),
        };
        let base = match algebra {
            Algebra::Real => 64,
            Algebra::Quaternion => 112,
            Algebra::Vectormap(_) => 90,
        };
        Ok(Self {
            name: name.to_string(),
            algebra,
            backend,
            block,
            multipliers,
            widths: vec![base, 2 * base, 4 * base, 8 * base],
            classes,
            input_size: 32,
            widen: 1,
            trainable_signs: false,
        })
    }

    pub fn preset_names() -> Vec<String> {
        let mut out = Vec::new();
        for family in ["resnet", "rphm", "quat", "vect", "qphm", "vphm"] {
            for depth in [18, 26, 34, 35, 50] {
                out.push(format!("{family}{depth}"));
            }
        }
        out
    }

    /// Divides every stage width by `divisor`, rounding up to a multiple of
    /// the algebra dimension so the result stays buildable.
    pub fn narrowed(mut self, divisor: usize) -> Self {
        let n = self.algebra.dim();
        for w in &mut self.widths {
            let shrunk = w.div_ceil(divisor.max(1));
            *w = shrunk.div_ceil(n) * n;
        }
        self
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.widths[stage] * self.widen
    }

    pub fn stage_out(&self, stage: usize) -> usize {
        self.stage_width(stage) * self.block.expansion()
    }

    /// Length of the pooled feature vector feeding the backend.
    pub fn feature_dim(&self) -> usize {
        self.stage_out(self.widths.len() - 1)
    }

    /// Input channels after zero-padding up to a multiple of the algebra
    /// dimension.
    pub fn stem_in_channels(&self) -> usize {
        INPUT_CHANNELS.div_ceil(self.algebra.dim()) * self.algebra.dim()
    }

    /// PHM dimension the backend will use, or `None` for a dense head.
    pub fn phm_n(&self) -> Result<Option<usize>> {
        self.backend.resolve("head", self.feature_dim(), self.classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.multipliers.len() != self.widths.len() {
            return Err(Error::config(
                "multipliers",
                format!(
                    "need one multiplier per stage width, got {} multipliers and {} widths",
                    self.multipliers.len(),
                    self.widths.len()
                ),
            ));
        }
        if self.multipliers.contains(&0) {
            return Err(Error::config("multipliers", "every stage needs at least one block"));
        }
        if self.widen == 0 {
            return Err(Error::config("widen", "must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        if self.input_size == 0 {
            return Err(Error::config("input_size", "must be positive"));
        }
        let n = self.algebra.dim();
        for s in 0..self.widths.len() {
            let w = self.stage_width(s);
            if w == 0 || !w.is_multiple_of(n) {
                return Err(Error::Divisibility {
                    layer: format!("stage{}", s + 1),
                    what: "width",
                    value: w,
                    n,
                    hint: crate::layers::CONV_HINT,
                });
            }
        }
        if let Some(n) = self.phm_n()? {
            let d = self.feature_dim();
            for (what, value) in [("input features d", d), ("output features k", self.classes)] {
                if value % n != 0 {
                    return Err(Error::Divisibility {
                        layer: "head".into(),
                        what,
                        value,
                        n,
                        hint: crate::layers::PHM_HINT,
                    });
                }
            }
        }
        Ok(())
    }
}

fn unknown_arch(name: &str) -> Error {
    Error::config(
        "arch",
        format!("unknown architecture `{name}`; expected one of {{resnet,rphm,quat,vect,qphm,vphm}}{{18,26,34,35,50}}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_columns() {
        let q = ArchitectureSpec::preset("qphm50", 100).unwrap();
        assert_eq!(q.widths, [112, 224, 448, 896]);
        assert_eq!(q.multipliers, [3, 4, 6, 3]);
        assert_eq!(q.phm_n().unwrap(), Some(4));
        assert_eq!(q.feature_dim(), 3584);

        let v = ArchitectureSpec::preset("vphm50", 100).unwrap();
        assert_eq!(v.widths, [90, 180, 360, 720]);
        assert_eq!(v.phm_n().unwrap(), Some(5));
    }

    #[test]
    fn prime_class_count_has_no_phm_dimension() {
        let err = ArchitectureSpec::preset("vphm50", 29).unwrap().validate().unwrap_err();
        assert!(matches!(err, Error::NoPhmDimension { .. }));
        assert!(err.to_string().contains("choose N dividing both d and k"));
        for classes in [28, 30] {
            assert!(ArchitectureSpec::preset("vphm50", classes).unwrap().validate().is_ok());
            assert!(ArchitectureSpec::preset("qphm18", classes).unwrap().validate().is_ok());
        }
    }

    #[test]
    fn narrowing_keeps_divisibility() {
        let s = ArchitectureSpec::preset("qphm18", 10).unwrap().narrowed(8);
        assert_eq!(s.widths, [16, 28, 56, 112]);
        s.validate().unwrap();
    }

    #[test]
    fn bad_width_names_stage() {
        let mut s = ArchitectureSpec::preset("quat18", 10).unwrap();
        s.widths[2] = 30;
        let msg = s.validate().unwrap_err().to_string();
        assert!(msg.starts_with("stage3:"), "{msg}");
    }

    #[test]
    fn backend_strings_round_trip() {
        for b in [Backend::Dense, Backend::Auto, Backend::Phm(5)] {
            assert_eq!(b.to_string().parse::<Backend>().unwrap(), b);
        }
        assert!("phm:0".parse::<Backend>().is_err());
    }
}
