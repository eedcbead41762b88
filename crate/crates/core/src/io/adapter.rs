//! Factored adapters stored as `<module>.lora_down.weight` /
//! `<module>.lora_up.weight` pairs. `lora_A`/`lora_B` names are accepted on
//! input. An optional scalar `<module>.alpha` sets `scale = alpha / rank`.
//! Every other tensor (DoRA magnitudes and the like) is carried through
//! untouched.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::archive::{serialize_archive, write_atomic, DType, Tensor, TensorArchive};
use crate::linalg::Matrix;
use crate::transfer::unflatten_conv;

pub const FORMAT_VERSION: &str = "1";

pub const KEY_FORMAT_VERSION: &str = "format_version";
pub const KEY_MODE: &str = "prolora.mode";
pub const KEY_RANK: &str = "prolora.rank";
pub const KEY_SOURCE_HASH: &str = "prolora.source_hash";
pub const KEY_THRESHOLD: &str = "prolora.threshold";
pub const KEY_ALPHA: &str = "prolora.alpha";

const DOWN_SUFFIXES: [&str; 2] = [".lora_down.weight", ".lora_A.weight"];
const UP_SUFFIXES: [&str; 2] = [".lora_up.weight", ".lora_B.weight"];
const ALPHA_SUFFIX: &str = ".alpha";

/// Original 4-D shapes of a conv adapter, kept so outputs can be reshaped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayout {
    /// `(out, in, kh, kw)` of the base kernel this adapter modifies.
    pub kernel: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModule {
    /// m×r
    pub up: Matrix,
    /// r×n
    pub down: Matrix,
    pub scale: f64,
    pub conv: Option<ConvLayout>,
}

impl AdapterModule {
    pub fn new(up: Matrix, down: Matrix, scale: f64) -> Result<Self> {
        let module = Self {
            up,
            down,
            scale,
            conv: None,
        };
        module.validate("<new>")?;
        Ok(module)
    }

    pub fn rank(&self) -> usize {
        self.up.ncols()
    }

    /// `(m, n)` of the dense delta.
    pub fn shape(&self) -> (usize, usize) {
        (self.up.nrows(), self.down.ncols())
    }

    /// `scale · up · down`
    pub fn delta(&self) -> Matrix {
        (&self.up * &self.down) * self.scale
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.up.ncols() != self.down.nrows() {
            return Err(Error::shape(format!(
                "adapter `{name}`: up is {}x{} but down is {}x{}",
                self.up.nrows(),
                self.up.ncols(),
                self.down.nrows(),
                self.down.ncols()
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::format(format!(
                "adapter `{name}` has scale {}, expected finite and > 0",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterSet {
    pub modules: BTreeMap<String, AdapterModule>,
    /// Pass-through tensors that are not up/down/alpha.
    pub aux: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

fn strip_any<'a>(name: &'a str, suffixes: &[&str]) -> Option<&'a str> {
    suffixes.iter().find_map(|s| name.strip_suffix(s))
}

fn scalar(t: &Tensor, name: &str) -> Result<f64> {
    match t.data.as_slice() {
        [x] => Ok(*x),
        _ => Err(Error::format(format!("`{name}` must hold a single value"))),
    }
}

impl AdapterSet {
    /// Largest module rank (0 for an empty set).
    pub fn rank(&self) -> usize {
        self.modules.values().map(AdapterModule::rank).max().unwrap_or(0)
    }

    pub fn source_hash(&self) -> Option<&str> {
        self.metadata.get(KEY_SOURCE_HASH).map(String::as_str)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let mut downs = BTreeMap::new();
        let mut ups = BTreeMap::new();
        let mut alphas = BTreeMap::new();
        let mut aux = BTreeMap::new();
        for name in archive.names() {
            let t = archive.tensor(name)?;
            if let Some(module) = strip_any(name, &DOWN_SUFFIXES) {
                if downs.insert(module.to_string(), t).is_some() {
                    return Err(Error::format(format!("duplicate down factor for `{module}`")));
                }
            } else if let Some(module) = strip_any(name, &UP_SUFFIXES) {
                if ups.insert(module.to_string(), t).is_some() {
                    return Err(Error::format(format!("duplicate up factor for `{module}`")));
                }
            } else if let Some(module) = name.strip_suffix(ALPHA_SUFFIX) {
                alphas.insert(module.to_string(), scalar(&t, name)?);
            } else {
                aux.insert(name.to_string(), t);
            }
        }

        let mut modules = BTreeMap::new();
        for (name, down) in downs {
            let up = ups
                .remove(&name)
                .ok_or_else(|| Error::format(format!("module `{name}` has a down factor but no up factor")))?;
            let module = Self::assemble(&name, &up, &down, alphas.remove(&name))?;
            modules.insert(name, module);
        }
        if let Some(name) = ups.keys().next() {
            return Err(Error::format(format!("module `{name}` has an up factor but no down factor")));
        }
        for (name, alpha) in alphas {
            // alpha without factors is not ours to interpret
            aux.insert(
                format!("{name}{ALPHA_SUFFIX}"),
                Tensor::new(DType::F32, vec![], vec![alpha])?,
            );
        }
        Ok(Self {
            modules,
            aux,
            metadata: archive.metadata().clone(),
        })
    }

    fn assemble(name: &str, up: &Tensor, down: &Tensor, alpha: Option<f64>) -> Result<AdapterModule> {
        let bad = |what: &str| Error::format(format!("module `{name}`: {what}"));
        let (up_m, down_m, conv) = match (up.shape.as_slice(), down.shape.as_slice()) {
            (&[m, r], &[r2, n]) => {
                if r != r2 {
                    return Err(bad("up/down ranks differ"));
                }
                (
                    Matrix::from_row_slice(m, r, &up.data),
                    Matrix::from_row_slice(r, n, &down.data),
                    None,
                )
            }
            (&[out, r, 1, 1], &[r2, inp, kh, kw]) => {
                if r != r2 {
                    return Err(bad("up/down ranks differ"));
                }
                (
                    Matrix::from_row_slice(out, r, &up.data),
                    Matrix::from_row_slice(r, inp * kh * kw, &down.data),
                    Some(ConvLayout {
                        kernel: [out, inp, kh, kw],
                    }),
                )
            }
            _ => {
                return Err(bad(&format!(
                    "unsupported factor shapes up {:?}, down {:?}",
                    up.shape, down.shape
                )))
            }
        };
        if up_m.iter().chain(down_m.iter()).any(|x| !x.is_finite()) {
            return Err(bad("non-finite factor entries"));
        }
        let rank = up_m.ncols();
        let scale = match alpha {
            Some(a) if rank > 0 => a / rank as f64,
            _ => 1.0,
        };
        let module = AdapterModule {
            up: up_m,
            down: down_m,
            scale,
            conv,
        };
        module.validate(name)?;
        Ok(module)
    }

    /// Tensors in output form. Factors are written in `dtype`; `alpha` is
    /// only emitted when the scale differs from 1.
    pub fn to_tensors(&self, dtype: DType) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, module) in &self.modules {
            module.validate(name)?;
            let r = module.rank();
            let (up, down) = match module.conv {
                None => (Tensor::from_matrix(&module.up, dtype), Tensor::from_matrix(&module.down, dtype)),
                Some(ConvLayout {
                    kernel: [o, i, kh, kw],
                }) => {
                    let down = unflatten_conv(&module.down, [r, i, kh, kw])?;
                    let up = Tensor::from_matrix(&module.up, dtype);
                    (
                        Tensor::new(dtype, vec![o, r, 1, 1], up.data)?,
                        Tensor::new(dtype, vec![r, i, kh, kw], down)?,
                    )
                }
            };
            out.insert(format!("{name}{}", DOWN_SUFFIXES[0]), down);
            out.insert(format!("{name}{}", UP_SUFFIXES[0]), up);
            if module.scale != 1.0 {
                out.insert(
                    format!("{name}{ALPHA_SUFFIX}"),
                    Tensor::new(DType::F32, vec![], vec![module.scale * r as f64])?,
                );
            }
        }
        for (name, t) in &self.aux {
            if out.insert(name.clone(), t.clone()).is_some() {
                return Err(Error::format(format!("aux tensor `{name}` collides with a factor")));
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        serialize_archive(&self.to_tensors(dtype)?, &self.metadata)
    }
}

/// Deterministic: names sorted, fixed header layout.
pub fn save_adapter(set: &AdapterSet, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    write_atomic(path.as_ref(), &set.to_bytes(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(rows: usize, cols: usize, start: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| start + (i * cols + j) as f64 * 0.125)
    }

    #[test]
    fn rank_32_module_writes_two_tensors() {
        let mut set = AdapterSet::default();
        set.modules.insert(
            "mid.attn.to_q".into(),
            AdapterModule::new(filled(640, 32, 0.0), filled(32, 640, 1.0), 1.0).unwrap(),
        );
        let t = set.to_tensors(DType::F32).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t["mid.attn.to_q.lora_up.weight"].shape, vec![640, 32]);
        assert_eq!(t["mid.attn.to_q.lora_down.weight"].shape, vec![32, 640]);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut set = AdapterSet::default();
        set.modules.insert(
            "a".into(),
            AdapterModule::new(filled(4, 2, 0.3), filled(2, 3, -1.0), 0.5).unwrap(),
        );
        set.aux.insert("a.magnitude".into(), Tensor::new(DType::F32, vec![4], vec![1., 2., 3., 4.]).unwrap());
        set.metadata.insert(KEY_FORMAT_VERSION.into(), FORMAT_VERSION.into());
        let first = set.to_bytes(DType::F32).unwrap();
        let loaded = AdapterSet::from_archive(&TensorArchive::from_bytes(first.clone()).unwrap()).unwrap();
        assert_eq!(loaded.modules["a"].scale, 0.5);
        assert!(loaded.aux.contains_key("a.magnitude"));
        assert_eq!(loaded.to_bytes(DType::F32).unwrap(), first);
    }

    #[test]
    fn empty_set_is_metadata_only() {
        let mut set = AdapterSet::default();
        set.metadata.insert(KEY_FORMAT_VERSION.into(), FORMAT_VERSION.into());
        let a = TensorArchive::from_bytes(set.to_bytes(DType::F32).unwrap()).unwrap();
        assert!(a.is_empty());
        assert_eq!(a.metadata()[KEY_FORMAT_VERSION], "1");
    }

    #[test]
    fn lora_a_b_alias_and_alpha() {
        let up = Tensor::from_matrix(&filled(3, 2, 0.0), DType::F32);
        let down = Tensor::from_matrix(&filled(2, 5, 0.0), DType::F32);
        let tensors = BTreeMap::from([
            ("x.lora_B.weight".to_string(), up),
            ("x.lora_A.weight".to_string(), down),
            ("x.alpha".to_string(), Tensor::new(DType::F32, vec![], vec![8.0]).unwrap()),
        ]);
        let a = TensorArchive::from_bytes(serialize_archive(&tensors, &BTreeMap::new()).unwrap()).unwrap();
        let set = AdapterSet::from_archive(&a).unwrap();
        let m = &set.modules["x"];
        assert_eq!(m.shape(), (3, 5));
        assert_eq!(m.scale, 4.0);
    }

    #[test]
    fn conv_adapter_round_trip() {
        let up = Tensor::new(DType::F32, vec![8, 2, 1, 1], (0..16).map(f64::from).collect()).unwrap();
        let down = Tensor::new(DType::F32, vec![2, 4, 3, 3], (0..72).map(f64::from).collect()).unwrap();
        let tensors = BTreeMap::from([
            ("c.lora_up.weight".to_string(), up.clone()),
            ("c.lora_down.weight".to_string(), down.clone()),
        ]);
        let a = TensorArchive::from_bytes(serialize_archive(&tensors, &BTreeMap::new()).unwrap()).unwrap();
        let set = AdapterSet::from_archive(&a).unwrap();
        assert_eq!(set.modules["c"].shape(), (8, 36));
        let back = set.to_tensors(DType::F32).unwrap();
        assert_eq!(back["c.lora_up.weight"], up);
        assert_eq!(back["c.lora_down.weight"], down);
    }

    #[test]
    fn unpaired_factor_rejected() {
        let tensors = BTreeMap::from([(
            "x.lora_up.weight".to_string(),
            Tensor::from_matrix(&filled(3, 2, 0.0), DType::F32),
        )]);
        let a = TensorArchive::from_bytes(serialize_archive(&tensors, &BTreeMap::new()).unwrap()).unwrap();
        assert!(matches!(AdapterSet::from_archive(&a), Err(Error::Format(_))));
    }

    #[test]
    fn invalid_scale_rejected() {
        assert!(AdapterModule::new(filled(2, 1, 0.0), filled(1, 2, 0.0), 0.0).is_err());
        assert!(AdapterModule::new(filled(2, 1, 0.0), filled(1, 2, 0.0), f64::NAN).is_err());
        assert!(AdapterModule::new(filled(2, 2, 0.0), filled(1, 2, 0.0), 1.0).is_err());
    }
}
