//! Named parameter sets, AdamW, and checkpoint directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::io::{load_tensor, save_tensor, Dtype};
use crate::numerics::{Gradients, Rng, Tape, Tensor, Var};

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

/// Tape handles for a [`ParamSet`], keyed by the same names.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on the tape, as trainable leaves or constants.
    pub fn register(&self, tape: &Tape, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }

    /// Views each tensor as a slice of one flat tape variable laid out as in
    /// [`ParamSet::flatten`], so a whole model is a function of one input.
    pub fn register_flat(&self, tape: &Tape, flat: Var) -> Result<ParamVars> {
        let n = tape.value_ref(flat).len();
        if n != self.numel() {
            return Err(Error::invalid(format!("flat variable has {n} values, parameter set {}", self.numel())));
        }
        let mut vars = BTreeMap::new();
        for ((name, range), t) in self.layout().into_iter().zip(self.params.values()) {
            let index: std::rc::Rc<[usize]> = range.collect();
            vars.insert(name, tape.gather(flat, index, t.shape())?);
        }
        Ok(ParamVars { vars })
    }

    /// Gradients for each registered tensor; zero where the loss is independent.
    pub fn collect_grads(&self, vars: &ParamVars, grads: &mut Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in &self.params {
            let g = vars
                .vars
                .get(name)
                .and_then(|v| grads.take(*v))
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        out
    }

    /// All values concatenated in name order.
    pub fn flatten(&self) -> Tensor {
        Tensor::from_vec(
            self.params
                .values()
                .flat_map(|t| t.data().iter().copied())
                .collect(),
        )
    }

    /// Inverse of [`ParamSet::flatten`] using this set's shapes.
    pub fn unflatten(&self, flat: &Tensor) -> Result<ParamSet> {
        if flat.len() != self.numel() {
            return Err(Error::invalid(format!(
                "flat vector has {} values, parameter set {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut out = ParamSet::new();
        let mut offset = 0;
        for (name, t) in &self.params {
            let n = t.len();
            out.insert(
                name.clone(),
                Tensor::new(t.shape().to_vec(), flat.data()[offset..offset + n].to_vec())?,
            );
            offset += n;
        }
        Ok(out)
    }

    /// Name and offset range of every tensor inside [`ParamSet::flatten`].
    pub fn layout(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|(k, t)| {
                let r = offset..offset + t.len();
                offset += t.len();
                (k.clone(), r)
            })
            .collect()
    }

    /// Writes one DRFT file per tensor plus `manifest.txt`
    /// (`name file dim0xdim1...` per line).
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("# drfuse checkpoint v1\n");
        for (name, t) in &self.params {
            let file = format!("{}.drft", name.replace('/', "_"));
            save_tensor(&dir.join(&file), t, Dtype::F64)?;
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(manifest, "{name} {file} {}", dims.join("x")).expect("string write");
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<ParamSet> {
        let path = dir.join("manifest.txt");
        if !path.exists() {
            return Err(Error::MissingCheckpoint(dir.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = ParamSet::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, file, dims] = fields[..] else {
                return Err(Error::format("checkpoint manifest", line.to_string()));
            };
            let t = load_tensor(&dir.join(file))?;
            let expected: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("checkpoint manifest", line.to_string()))?;
            if t.shape() != expected.as_slice() {
                return Err(Error::format(
                    "checkpoint manifest",
                    format!("{name}: manifest says {dims}, file holds {:?}", t.shape()),
                ));
            }
            out.insert(name.to_string(), t);
        }
        Ok(out)
    }

    /// Copies every entry of `other` into `self`, prefixing names.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in &other.params {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in &self.params {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest.to_string(), v.clone());
            }
        }
        out
    }
}

/// Normal init with standard deviation `std`.
pub fn init_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gaussian() * std)
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has an entry in `grads`. Names missing
    /// from `grads` (frozen parameters) are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            g.check_finite(&format!("gradient of {name}"))?;
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *pv -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(4);
        let mut p = ParamSet::new();
        p.insert("enc.w", init_normal(&[3, 2, 3, 3], 0.3, &mut rng));
        p.insert("codebook", init_normal(&[4, 2], 1.0, &mut rng));
        p.save_dir(dir.path()).unwrap();
        let back = ParamSet::load_dir(dir.path()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn missing_checkpoint_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ParamSet::load_dir(&dir.path().join("nope")),
            Err(Error::MissingCheckpoint(_))
        ));
    }

    #[test]
    fn flatten_round_trip() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::from_vec(vec![1.0, 2.0]));
        p.insert("b", Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let f = p.flatten();
        assert_eq!(f.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.unflatten(&f).unwrap(), p);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(vec![3.0, -2.0]));
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..300 {
            let mut g = ParamSet::new();
            g.insert("x", p.get("x").unwrap().scale(2.0));
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.get("x").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(vec![1.0]));
        let mut opt = AdamW::new(0.1, 0.5);
        let mut g = ParamSet::new();
        g.insert("x", Tensor::from_vec(vec![0.0]));
        opt.step(&mut p, &g).unwrap();
        assert!((p.get("x").unwrap().data()[0] - 0.95).abs() < 1e-12);
    }
}
