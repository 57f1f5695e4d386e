use std::rc::Rc;

use gcma_core::dpeaks::ClusterState;
use gcma_core::graph_io::synthetic::{attributed_sbm, SbmSpec};
use gcma_core::numeric::gradcheck::check;
use gcma_core::numeric::{Tensor2, Var};
use gcma_core::selfopt::{soft_assign_value, target_distribution};
use gcma_core::trainer::{JointTerms, TrainConfig, Trainer};

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        alpha: 0.7,
        beta: 0.3,
        gamma: 1.3,
        lambda_1: 1.0,
        lambda_2: 0.5,
        lambda_3: 2.0,
        pretrain_epochs: 1,
        steps_per_epoch: 1,
        embed_dim: 3,
        gat_hidden: 2,
        gat_heads: 2,
        ae_hidden: vec![4],
        proj_hidden: 3,
        gae_hidden: 3,
        ..TrainConfig::default()
    }
}

/// Worst relative error and number of checked parameters for the term
/// selected by `pick`, over the full model on a two-block graph.
pub fn check_term(pick: fn(&JointTerms) -> Var, h: f64) -> (f64, usize) {
    let graph = attributed_sbm(&SbmSpec { communities: 2, size: 4, p_in: 0.8, p_out: 0.1, d_in: 6, words: 3, purity: 0.8 }, 5).unwrap();
    let trainer = Trainer::new(&graph, tiny_config()).unwrap();
    let mut pre = trainer.pretrain().unwrap();
    let x = gcma_core::encoder::FeatureInput::new(graph.features());
    let z = pre.model.embedding(&graph, &x).unwrap();
    let labels: Vec<usize> = (0..graph.n()).map(|i| i / 4).collect();
    let state = ClusterState::from_labels(&z, vec![0, 4], labels).unwrap();
    let mu = Tensor2::from_vec(2, 3, vec![0.3, -0.2, 0.5, -0.4, 0.1, -0.6]).unwrap();
    let p = Rc::new(target_distribution(&soft_assign_value(&z, &mu, 1.0).unwrap()).unwrap());
    pre.model.mu = Some(pre.model.store.insert("cluster.mu", mu));
    let inputs = (0..64).map(|s| trainer.sample_inputs(s).unwrap()).find(|i| !i.loss_nodes().is_empty()).unwrap();

    let mut store = pre.model.store.clone();
    let model = &pre.model;
    let r = check(&mut store, h, |tape, ps| {
        let terms = trainer.joint_terms(tape, ps, model, &inputs, &pre.targets, &state, &p)?;
        Ok(pick(&terms))
    })
    .unwrap();
    (r.worst(), r.per_param.len())
}
