//! Linear task heads and the task, alignment and total losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{truncated_normal, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, IGNORE_INDEX};

/// One affine layer per head: intents from the CLS row, slot tags per token.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub intent_w: Tensor,
    pub intent_b: Tensor,
    pub slot_w: Tensor,
    pub slot_b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHeads {
    pub intent_w: Var,
    pub intent_b: Var,
    pub slot_w: Var,
    pub slot_b: Var,
}

impl HeadParams {
    pub fn init(d_model: usize, n_intents: usize, n_slot_tags: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        HeadParams {
            intent_w: truncated_normal(&mut rng, vec![d_model, n_intents], INIT_STD),
            intent_b: Tensor::parameter(vec![n_intents], vec![0.0; n_intents]),
            slot_w: truncated_normal(&mut rng, vec![d_model, n_slot_tags], INIT_STD),
            slot_b: Tensor::parameter(vec![n_slot_tags], vec![0.0; n_slot_tags]),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("heads.intent.w".to_string(), &self.intent_w),
            ("heads.intent.b".to_string(), &self.intent_b),
            ("heads.slot.w".to_string(), &self.slot_w),
            ("heads.slot.b".to_string(), &self.slot_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.intent_w,
            &mut self.intent_b,
            &mut self.slot_w,
            &mut self.slot_b,
        ]
    }

    pub fn bind(&self, graph: &mut Graph) -> BoundHeads {
        BoundHeads {
            intent_w: graph.leaf(&self.intent_w),
            intent_b: graph.leaf(&self.intent_b),
            slot_w: graph.leaf(&self.slot_w),
            slot_b: graph.leaf(&self.slot_b),
        }
    }
}

impl BoundHeads {
    pub fn vars(&self) -> [Var; 4] {
        [self.intent_w, self.intent_b, self.slot_w, self.slot_b]
    }
}

fn affine(graph: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = graph.matmul(x, w)?;
    graph.add_bias(y, b)
}

/// `[B, H]` to `[B, n_intents]`.
pub fn intent_logits(graph: &mut Graph, cls: Var, heads: &BoundHeads) -> Result<Var> {
    if graph.shape(cls).len() != 2 {
        return Err(Error::Rank {
            op: "intent_logits",
            shape: graph.shape(cls).to_vec(),
        });
    }
    affine(graph, cls, heads.intent_w, heads.intent_b)
}

/// `[B, L, H]` to `[B, L, n_slot_tags]`.
pub fn slot_logits(graph: &mut Graph, tokens: Var, heads: &BoundHeads) -> Result<Var> {
    if graph.shape(tokens).len() != 3 {
        return Err(Error::Rank {
            op: "slot_logits",
            shape: graph.shape(tokens).to_vec(),
        });
    }
    affine(graph, tokens, heads.slot_w, heads.slot_b)
}

/// Graph handles of one step's losses. `align` and `slot` are absent when
/// the corresponding term is not computed.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub intent: Var,
    pub slot: Option<Var>,
    pub task: Var,
    pub align: Option<Var>,
    pub total: Var,
}

/// Intent cross-entropy plus, when any slot target is present, slot
/// cross-entropy over non-ignored positions. Unweighted sum.
pub fn task_loss(
    graph: &mut Graph,
    intent_logits: Var,
    intents: &[i64],
    slot_logits: Option<Var>,
    slots: &[i64],
) -> Result<(Var, Var, Option<Var>)> {
    if intents.iter().all(|&t| t == IGNORE_INDEX) {
        return Err(Error::Input("task loss needs intent targets".into()));
    }
    let intent = graph.cross_entropy(intent_logits, intents, IGNORE_INDEX)?;
    let slot = match slot_logits {
        Some(logits) if slots.iter().any(|&t| t != IGNORE_INDEX) => {
            let shape = graph.shape(logits).to_vec();
            let tags = *shape.last().expect("rank checked by slot_logits");
            let flat = graph.reshape(logits, vec![shape.iter().product::<usize>() / tags, tags])?;
            Some(graph.cross_entropy(flat, slots, IGNORE_INDEX)?)
        }
        _ => None,
    };
    let task = match slot {
        Some(s) => graph.add(intent, s)?,
        None => intent,
    };
    Ok((task, intent, slot))
}

/// Mean squared difference of paired CLS embeddings. Both branches keep
/// their gradients.
pub fn xero_align_loss(graph: &mut Graph, cls_source: Var, cls_target: Var) -> Result<Var> {
    let (a, b) = (graph.shape(cls_source).to_vec(), graph.shape(cls_target).to_vec());
    if a.first() != b.first() {
        return Err(Error::Pairing(format!(
            "{} source rows paired with {} target rows",
            a.first().copied().unwrap_or(0),
            b.first().copied().unwrap_or(0)
        )));
    }
    graph.mse(cls_source, cls_target)
}

/// `task + lambda * align`.
pub fn total_loss(graph: &mut Graph, task: Var, align: Var, lambda: f64) -> Result<Var> {
    let weighted = graph.scale(align, lambda);
    graph.add(task, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::parameter(shape, data)
    }

    fn heads(w: Vec<f64>, b: Vec<f64>) -> HeadParams {
        HeadParams {
            intent_w: t(vec![2, 2], w.clone()),
            intent_b: t(vec![2], b.clone()),
            slot_w: t(vec![2, 2], w),
            slot_b: t(vec![2], b),
        }
    }

    #[test]
    fn intent_logits_hand_cases() {
        let mut g = Graph::new();
        let h = heads(vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0]).bind(&mut g);
        let x = g.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let y = intent_logits(&mut g, x, &h).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);

        let mut g = Graph::new();
        let h = heads(vec![0.0; 4], vec![0.5, -1.5]).bind(&mut g);
        let x = g.constant(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = intent_logits(&mut g, x, &h).unwrap();
        assert_eq!(g.value(y), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut g = Graph::new();
        let h = heads(vec![0.0; 4], vec![0.0; 2]).bind(&mut g);
        let x = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(intent_logits(&mut g, x, &h).is_err());
        let x = g.constant(vec![2], vec![0.0; 2]).unwrap();
        assert!(intent_logits(&mut g, x, &h).is_err());
    }

    #[test]
    fn slot_logits_match_rowwise_affine() {
        let hp = HeadParams::init(3, 2, 5, 1);
        let mut g = Graph::new();
        let h = hp.bind(&mut g);
        let data: Vec<f64> = (0..2 * 7 * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(vec![2, 7, 3], data.clone()).unwrap();
        let y = slot_logits(&mut g, x, &h).unwrap();
        assert_eq!(g.shape(y), &[2, 7, 5]);
        let (w, b) = (hp.slot_w.data(), hp.slot_b.data());
        for row in 0..14 {
            for c in 0..5 {
                let mut want = b[c];
                for k in 0..3 {
                    want += data[row * 3 + k] * w[k * 5 + c];
                }
                assert!((g.value(y)[row * 5 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn intent_weight_gradient_matches_finite_differences() {
        let x = t(vec![3, 4], (0..12).map(|i| (i as f64 * 0.7).cos()).collect());
        let w = t(vec![4, 5], (0..20).map(|i| (i as f64 * 0.3).sin()).collect());
        let b = t(vec![5], vec![0.1, -0.2, 0.3, 0.0, 0.05]);
        let report = grad_check(
            |g, v| {
                let y = affine(g, v[0], v[1], v[2])?;
                g.cross_entropy(y, &[0, 3, 4], IGNORE_INDEX)
            },
            &[x, w, b],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn task_loss_cases() {
        let mut g = Graph::new();
        let logits = g.constant(vec![1, 4], vec![0.3; 4]).unwrap();
        let (task, intent, slot) = task_loss(&mut g, logits, &[2], None, &[]).unwrap();
        assert_eq!(g.scalar(task).unwrap(), g.scalar(intent).unwrap());
        assert!(slot.is_none());
        assert!((g.scalar(task).unwrap() - 4f64.ln()).abs() < 1e-12);

        let sl = g.constant(vec![1, 2, 3], vec![0.0; 6]).unwrap();
        let (task, _, slot) =
            task_loss(&mut g, logits, &[2], Some(sl), &[IGNORE_INDEX, IGNORE_INDEX]).unwrap();
        assert!(slot.is_none());
        assert!((g.scalar(task).unwrap() - 4f64.ln()).abs() < 1e-12);

        let (task, _, slot) = task_loss(&mut g, logits, &[2], Some(sl), &[IGNORE_INDEX, 1]).unwrap();
        assert!(slot.is_some());
        assert!((g.scalar(task).unwrap() - 4f64.ln() - 3f64.ln()).abs() < 1e-12);

        let sharp = g.constant(vec![1, 3], vec![0.0, 60.0, 0.0]).unwrap();
        let (task, _, _) = task_loss(&mut g, sharp, &[1], None, &[]).unwrap();
        assert!(g.scalar(task).unwrap() < 1e-20);

        assert!(task_loss(&mut g, logits, &[IGNORE_INDEX], None, &[]).is_err());
    }

    #[test]
    fn align_loss_cases() {
        let mut g = Graph::new();
        let a = g.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = g.constant(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let l = xero_align_loss(&mut g, a, b).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 1.0);
        let same = xero_align_loss(&mut g, a, a).unwrap();
        assert_eq!(g.scalar(same).unwrap(), 0.0);
        let c = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(xero_align_loss(&mut g, a, c), Err(Error::Pairing(_))));
    }

    #[test]
    fn total_loss_cases() {
        let mut g = Graph::new();
        let task = g.constant(vec![], vec![2.0]).unwrap();
        let align = g.constant(vec![], vec![0.5]).unwrap();
        let tot = total_loss(&mut g, task, align, 1.0).unwrap();
        assert_eq!(g.scalar(tot).unwrap(), 2.5);
        let tot = total_loss(&mut g, task, align, 0.0).unwrap();
        assert_eq!(g.scalar(tot).unwrap(), 2.0);
    }

    #[test]
    fn total_gradient_is_task_plus_scaled_align() {
        let w0 = t(vec![2, 2], vec![0.3, -0.4, 0.8, 0.1]);
        let grad_of = |which: u8, lambda: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let w = g.leaf(&w0);
            let x = g.constant(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
            let y = g.constant(vec![2, 2], vec![0.2, 0.1, 0.0, -0.3]).unwrap();
            let xs = g.matmul(x, w).unwrap();
            let ys = g.matmul(y, w).unwrap();
            let task = g.cross_entropy(xs, &[0, 1], IGNORE_INDEX).unwrap();
            let align = xero_align_loss(&mut g, xs, ys).unwrap();
            let loss = match which {
                0 => task,
                1 => align,
                _ => total_loss(&mut g, task, align, lambda).unwrap(),
            };
            g.backward(loss).unwrap();
            g.grad(w).unwrap().to_vec()
        };
        let lambda = 0.7;
        let (gt, ga, gtot) = (grad_of(0, 0.0), grad_of(1, 0.0), grad_of(2, lambda));
        for i in 0..4 {
            assert!((gtot[i] - (gt[i] + lambda * ga[i])).abs() < 1e-14);
        }
    }
}
