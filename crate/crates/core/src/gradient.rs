//! Reverse-mode gradients of scalar losses built from field jets.
//!
//! A loss is described by a set of [`FieldRequest`]s (which field, at which
//! points, to which derivative order) and a closure that turns the resulting
//! jets and a vector of free scalar parameters into a value plus its
//! sensitivities. [`loss_gradient`] runs the forward passes, calls the closure
//! and pulls the sensitivities back through every field, returning one flat
//! gradient laid out as `[field 0 params, field 1 params, .., scalars]`.

use crate::error::{Error, Result};
use crate::field::{BatchJet, JetAdjoint, JetOrder, NeuralField};

/// One batched evaluation needed by a loss.
#[derive(Debug, Clone, Copy)]
pub struct FieldRequest<'a> {
    pub field: usize,
    /// Point-major coordinates, `B x n` flattened.
    pub points: &'a [f64],
    pub order: JetOrder,
}

/// What a loss closure reports back.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    /// One adjoint per request, in request order.
    pub adjoints: Vec<JetAdjoint>,
    /// Sensitivity to each scalar parameter.
    pub scalar_grad: Vec<f64>,
}

/// Offsets of each block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub field_ranges: Vec<(usize, usize)>,
    pub scalar_range: (usize, usize),
}

impl ParamLayout {
    pub fn new(fields: &[&NeuralField], scalars: usize) -> Self {
        let mut off = 0;
        let field_ranges = fields
            .iter()
            .map(|f| {
                let r = (off, off + f.num_params());
                off = r.1;
                r
            })
            .collect();
        ParamLayout {
            field_ranges,
            scalar_range: (off, off + scalars),
        }
    }

    pub fn total(&self) -> usize {
        self.scalar_range.1
    }
}

pub fn flatten(fields: &[&NeuralField], scalars: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = fields
        .iter()
        .flat_map(|f| f.params().iter().copied())
        .collect();
    v.extend_from_slice(scalars);
    v
}

/// Value and flat gradient of `loss` over all field parameters and `scalars`.
pub fn loss_gradient<F>(
    fields: &[&NeuralField],
    scalars: &[f64],
    requests: &[FieldRequest<'_>],
    loss: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&[BatchJet], &[f64]) -> Result<LossEval>,
{
    let jets = requests
        .iter()
        .map(|r| fields[r.field].forward_batch(r.points, r.order, false))
        .collect::<Result<Vec<_>>>()?;
    let eval = loss(&jets, scalars)?;
    if !eval.value.is_finite() {
        return Err(Error::DivergedLoss {
            term: "total".into(),
            value: eval.value,
        });
    }
    assert_eq!(
        eval.adjoints.len(),
        requests.len(),
        "one adjoint per request"
    );
    assert_eq!(eval.scalar_grad.len(), scalars.len());

    let layout = ParamLayout::new(fields, scalars.len());
    let mut grad = vec![0.0; layout.total()];
    for ((req, jet), adj) in requests.iter().zip(&jets).zip(&eval.adjoints) {
        let (a, b) = layout.field_ranges[req.field];
        fields[req.field].backward_into(jet, adj, &mut grad[a..b]);
    }
    grad[layout.scalar_range.0..].copy_from_slice(&eval.scalar_grad);
    Ok((eval.value, grad))
}
