//! Meta-training at the default rates lowers the validation combined loss on
//! the desk dataset for nearly every seed.

use booml_core::encoder::init_params;
use booml_core::harness::{prepare, ExperimentConfig};
use booml_core::metaopt::{run_meta_training, MetaVariant};
use booml_core::objectives::GroupWeights;
use booml_core::training::Monitor;

#[test]
fn combined_loss_descends_on_desk() {
    let cfg = ExperimentConfig::default();
    let mut descended = 0;
    for seed in 0..10 {
        let c = cfg.for_seed(seed);
        let p = prepare(&c, seed).unwrap();
        let monitor = Monitor::new(&p.dataset, &p.encoder, &p.groups, c.eval).unwrap();
        let init = init_params(&c.encoder, p.dataset.num_users, p.dataset.num_items, seed).unwrap();
        let weights = GroupWeights::uniform(p.groups.num_groups(), 1.0, 1.0);
        let out = run_meta_training(&monitor, init, &weights, &c.meta, MetaVariant::OrthoMeta, None).unwrap();
        assert_eq!(out.epochs(), c.meta.epochs);
        if out.last().val_loss < out.initial().val_loss {
            descended += 1;
        }
    }
    assert!(descended >= 9, "validation loss fell in only {descended}/10 seeds");
}
