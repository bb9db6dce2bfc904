use std::collections::{HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

impl Tensor {
    /// Back-propagates from this scalar, accumulating into every reachable
    /// leaf that requires a gradient. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                Some(backward) => {
                    let parent_grads = backward(&node.0.data, &g);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
                None => node.accumulate_grad(&g),
            }
        }
        Ok(())
    }
}

/// Post-order DFS over the differentiable part of the graph.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for parent in &node.0.parents {
            if parent.requires_grad() && !visited.contains(&parent.id()) {
                stack.push((parent.clone(), false));
            }
        }
    }
    order
}
