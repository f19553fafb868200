use std::collections::{HashMap, HashSet};

use super::{no_grad, with_grad_mode, Element, Tensor};
use crate::error::{Error, Result};

/// Graph nodes reachable from `root` through differentiable inputs, in
/// post-order: every node appears after all of its inputs.
fn topological_order<T: Element>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(gf) = t.grad_fn() {
            for inp in gf.inputs().iter().rev() {
                if inp.requires_grad() && !seen.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of a single-element `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` the returned gradients are themselves graph nodes and
/// can be differentiated again. A target that the output does not depend on
/// is reported as [`Error::Disconnected`] rather than a zero gradient.
pub fn grad<T: Element>(output: &Tensor<T>, wrt: &[Tensor<T>], create_graph: bool) -> Result<Vec<Tensor<T>>> {
    if output.numel() != 1 {
        return Err(Error::NonScalarOutput(output.shape().to_vec()));
    }
    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let order = if output.requires_grad() {
        topological_order(output)
    } else {
        Vec::new()
    };

    // which nodes lead to at least one target
    let mut reaches: HashMap<u64, bool> = HashMap::with_capacity(order.len());
    for t in &order {
        let via_inputs = t
            .grad_fn()
            .map(|gf| gf.inputs().iter().any(|i| reaches.get(&i.id()).copied().unwrap_or(false)))
            .unwrap_or(false);
        reaches.insert(t.id(), targets.contains(&t.id()) || via_inputs);
    }
    let reaches_target = |t: &Tensor<T>| reaches.get(&t.id()).copied().unwrap_or(false);

    let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
    with_grad_mode(create_graph, || -> Result<()> {
        if !reaches_target(output) {
            return Ok(());
        }
        grads.insert(output.id(), Tensor::ones(output.shape()));
        for t in order.iter().rev() {
            if !reaches_target(t) {
                continue;
            }
            let Some(gf) = t.grad_fn() else { continue };
            let g = if targets.contains(&t.id()) {
                match grads.get(&t.id()) {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads.remove(&t.id()) {
                    Some(g) => g,
                    None => continue,
                }
            };
            let need: Vec<bool> = gf.inputs().iter().map(|i| i.requires_grad() && reaches_target(i)).collect();
            let input_grads = (gf.backward)(&g, &need)?;
            for ((inp, gi), needed) in gf.inputs().iter().zip(input_grads).zip(&need) {
                let (Some(gi), true) = (gi, *needed) else { continue };
                debug_assert_eq!(gi.shape(), inp.shape(), "gradient shape for {:?}", gf.name);
                let acc = match grads.remove(&inp.id()) {
                    Some(prev) => prev.add(&gi)?,
                    None => gi,
                };
                grads.insert(inp.id(), acc);
            }
        }
        Ok(())
    })?;

    wrt.iter()
        .enumerate()
        .map(|(index, t)| grads.get(&t.id()).cloned().ok_or(Error::Disconnected { index }))
        .collect()
}

/// Central-difference estimate of the gradient of a scalar function:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element `i`.
pub fn finite_difference_gradient<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    no_grad(|| {
        let base = x.to_vec();
        let mut out = Vec::with_capacity(base.len());
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + eps;
            let plus = f(&Tensor::from_vec(probe.clone(), x.shape())?)?.item()?;
            probe[i] = base[i] - eps;
            let minus = f(&Tensor::from_vec(probe.clone(), x.shape())?)?.item()?;
            probe[i] = base[i];
            out.push((plus - minus) / (eps + eps));
        }
        Tensor::from_vec(out, x.shape())
    })
}
