#![allow(dead_code)]

use deepbroadcast::chansim::ChannelSpec;
use deepbroadcast::data::TaskSpec;
use deepbroadcast::net::Variant;
use deepbroadcast::trainer::TrainConfig;

/// Two classification users on AWGN and Rayleigh with a narrow network.
pub fn small_config(variant: Variant) -> TrainConfig {
    let tasks = vec![TaskSpec::task1(0.5), TaskSpec::task3(0.5)];
    let mut cfg = TrainConfig::new(variant, tasks, vec![ChannelSpec::awgn(), ChannelSpec::rayleigh()]);
    cfg.model.c1 = 4;
    cfg.model.fusion_hidden = 32;
    cfg.model.query_hidden = 8;
    cfg.model.decoder_hidden = 32;
    cfg.model.executor_hidden = 16;
    cfg.epochs = 2;
    cfg.batch_size = 32;
    cfg.seed = 5;
    cfg
}
