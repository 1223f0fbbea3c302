//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every forward operation appends one node holding its output value and a
//! boxed backward closure. Nodes are identified by [`Var`] handles, which are
//! plain indices into the tape. Because nodes are appended in execution
//! order, walking the tape from the loss index down to zero visits every
//! node after all of its consumers, so a single reverse sweep with `+=`
//! accumulation implements the chain rule for arbitrary DAGs.
//!
//! Memory discipline: the tape owns the only copy of every intermediate
//! activation. During the backward sweep each interior node's value and
//! gradient are dropped as soon as they can no longer be read, which roughly
//! halves peak memory for deep networks. Leaf nodes (parameters bound via
//! [`Tape::param`] and inputs from [`Tape::constant`]) keep their gradients
//! so callers can collect them afterwards.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ===== Variables and stores =====

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read access to forward values for backward closures.
pub struct ValueStore<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ValueStore<T> {
    /// Fetches a live forward value. Panics if the slot was already freed,
    /// which would mean an operation read a value after its consumers were
    /// all processed and is a bug in the tape walk order.
    pub fn get(&self, v: Var) -> &Tensor<T> {
        self.slots[v.0]
            .as_ref()
            .expect("backward closure read a freed forward value")
    }
}

/// Gradient accumulation for backward closures.
pub struct GradStore<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradStore<T> {
    /// Adds `delta` into the gradient slot of `v`.
    pub fn accumulate(&mut self, v: Var, delta: Tensor<T>) {
        match &mut self.slots[v.0] {
            Some(g) => {
                assert_eq!(
                    g.shape(),
                    delta.shape(),
                    "gradient contributions disagree on shape"
                );
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += *di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

type BackwardFn<T> = Box<dyn FnOnce(&ValueStore<T>, Tensor<T>, &mut GradStore<T>) + Send>;

// ===== Parameter store =====

/// Handle to an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position of the entry in store order.
    pub fn index(self) -> usize {
        self.0
    }
}

struct ParamEntry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Owns model state across training steps: trainable weights plus
/// non-trainable buffers such as batch-norm running statistics. Names are
/// unique and stable, and double as keys in checkpoints.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "parameter name '{name}' is already taken"
            )));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of stored scalars across all entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Converts every entry to another precision, preserving names, order,
    /// and trainability.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.add(&e.name, e.value.cast(), e.trainable)
                .expect("names are unique by construction");
        }
        out
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ===== Tape =====

/// Recording of one forward pass, consumed by [`Tape::backward`].
pub struct Tape<T: Scalar> {
    backwards: Vec<Option<BackwardFn<T>>>,
    values: ValueStore<T>,
    grads: GradStore<T>,
    /// Parameter bindings in bind order, used to route gradients back to the
    /// [`ParamStore`] after the sweep.
    param_binds: Vec<(ParamId, Var)>,
    bound: HashMap<usize, ()>,
    completed: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            backwards: Vec::new(),
            values: ValueStore { slots: Vec::new() },
            grads: GradStore { slots: Vec::new() },
            param_binds: Vec::new(),
            bound: HashMap::new(),
            completed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.backwards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backwards.is_empty()
    }

    /// Appends a node. Interior nodes carry a backward closure; leaves pass
    /// `None` and keep their gradient after the sweep.
    pub(crate) fn push(&mut self, value: Tensor<T>, backward: Option<BackwardFn<T>>) -> Var {
        let v = Var(self.backwards.len());
        self.backwards.push(backward);
        self.values.slots.push(Some(value));
        self.grads.slots.push(None);
        v
    }

    /// Records an input tensor that is not a trainable parameter. Its
    /// gradient is still computed and kept, which finite-difference tests
    /// rely on.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    /// Copies a parameter's current value onto the tape and remembers the
    /// binding so [`Tape::collect_param_grads`] can route the gradient back.
    /// Binding the same parameter twice is rejected.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if self.bound.contains_key(&id.0) {
            return Err(Error::Autodiff(format!(
                "parameter '{}' bound twice on one tape",
                store.name(id)
            )));
        }
        self.bound.insert(id.0, ());
        let v = self.push(store.get(id).clone(), None);
        self.param_binds.push((id, v));
        Ok(v)
    }

    /// Forward value of a node. After [`Tape::backward`] interior values are
    /// freed and no longer readable.
    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.values.slots[v.0]
            .as_ref()
            .ok_or_else(|| Error::Autodiff(format!("value of node {} was freed", v.0)))
    }

    /// Runs the reverse sweep, seeding the scalar `root` with gradient one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.completed {
            return Err(Error::Autodiff(
                "backward was already run on this tape".into(),
            ));
        }
        let root_shape = {
            let root_value = self.value(root)?;
            if root_value.numel() != 1 {
                return Err(Error::Autodiff(format!(
                    "backward root must be a scalar, got shape {:?}",
                    root_value.shape()
                )));
            }
            root_value.shape().to_vec()
        };
        self.completed = true;
        self.grads.slots[root.0] = Some(Tensor::filled(&root_shape, T::one())?);

        for i in (0..=root.0).rev() {
            let backward = self.backwards[i].take();
            match backward {
                Some(f) => {
                    // Interior node: propagate if any gradient arrived, then
                    // free both its gradient and its forward value. All of
                    // its consumers sit at higher indices and have already
                    // been processed, so nothing can read them again.
                    if let Some(grad_out) = self.grads.slots[i].take() {
                        f(&self.values, grad_out, &mut self.grads);
                    }
                    self.values.slots[i] = None;
                }
                None => {
                    // Leaf: keep the gradient for collection. The value copy
                    // is no longer needed.
                    self.values.slots[i] = None;
                }
            }
        }
        // Nodes recorded after the root never influence it.
        for i in root.0 + 1..self.backwards.len() {
            self.backwards[i] = None;
            self.values.slots[i] = None;
            self.grads.slots[i] = None;
        }
        Ok(())
    }

    /// Gradient of a leaf node after the sweep.
    pub fn grad(&self, v: Var) -> Result<&Tensor<T>> {
        if !self.completed {
            return Err(Error::Autodiff("gradients are only available after backward".into()));
        }
        self.grads.slots[v.0].as_ref().ok_or_else(|| {
            Error::Autodiff(format!(
                "node {} has no stored gradient (interior gradients are freed)",
                v.0
            ))
        })
    }

    /// Moves the gradients of all bound parameters out of the tape, in bind
    /// order. Every bound parameter must have received a gradient.
    pub fn collect_param_grads(&mut self, store: &ParamStore<T>) -> Result<Vec<(ParamId, Tensor<T>)>> {
        if !self.completed {
            return Err(Error::Autodiff("gradients are only available after backward".into()));
        }
        let mut out = Vec::with_capacity(self.param_binds.len());
        for &(id, v) in &self.param_binds {
            let g = self.grads.slots[v.0].take().ok_or_else(|| {
                Error::Autodiff(format!(
                    "parameter '{}' received no gradient",
                    store.name(id)
                ))
            })?;
            out.push((id, g));
        }
        Ok(out)
    }

    // ===== Elementwise arithmetic =====

    /// Elementwise sum of two equally shaped nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += *x;
        }
        Ok(self.push(
            out,
            Some(Box::new(move |_vals, grad_out, grads| {
                grads.accumulate(a, grad_out.clone());
                grads.accumulate(b, grad_out);
            })),
        ))
    }

    /// Elementwise product of two equally shaped nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= *x;
        }
        Ok(self.push(
            out,
            Some(Box::new(move |vals, grad_out, grads| {
                let (va, vb) = (vals.get(a), vals.get(b));
                let mut da = grad_out.clone();
                for (d, x) in da.data_mut().iter_mut().zip(vb.data()) {
                    *d *= *x;
                }
                let mut db = grad_out;
                for (d, x) in db.data_mut().iter_mut().zip(va.data()) {
                    *d *= *x;
                }
                grads.accumulate(a, da);
                grads.accumulate(b, db);
            })),
        ))
    }

    /// Sum of all elements, producing a scalar node. The reduction
    /// accumulates in `f64` regardless of `T`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x)?;
        let total: f64 = vx.data().iter().map(|v| v.as_f64()).sum();
        Ok(self.push(
            Tensor::scalar(T::from_f64(total)),
            Some(Box::new(move |vals, grad_out, grads| {
                let g = grad_out.data()[0];
                let shape = vals.get(x).shape().to_vec();
                grads.accumulate(x, Tensor::filled(&shape, g).expect("input shape is valid"));
            })),
        ))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ===== Finite differences =====

/// Compares an analytic gradient against central differences of `f` at `x`,
/// coordinate by coordinate, and returns the largest relative error
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` must evaluate the scalar objective as a pure function of `x`. The
/// step `epsilon` must lie in `[1e-7, 1e-3]`; outside that window central
/// differences in `f64` are dominated by roundoff or truncation error and
/// the comparison would be meaningless.
pub fn finite_difference_check<F>(
    f: &mut F,
    x: &mut Tensor<f64>,
    analytic: &Tensor<f64>,
    epsilon: f64,
) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "finite difference step {epsilon:e} outside [1e-7, 1e-3]"
        )));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!(
            "analytic gradient shape {:?} does not match input shape {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let saved = x.data()[i];
        x.data_mut()[i] = saved + epsilon;
        let plus = f(x)?;
        x.data_mut()[i] = saved - epsilon;
        let minus = f(x)?;
        x.data_mut()[i] = saved;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
