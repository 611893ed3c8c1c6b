use metasysid_core::datastream::{StreamConfig, SystemClass};
use metasysid_core::eval::eval_prediction;
use metasysid_core::metamodel::{DecoderOnlyConfig, ModelSpec};
use metasysid_core::nncore::AdamWConfig;
use metasysid_core::sysgen::EigenRegion;
use metasysid_core::trainer::{train, MetaModel, TrainConfig};

fn main() {
    let iters: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let stream = StreamConfig {
        system_class: SystemClass::Lti, seq_len: 201, batch_size: 16, global_seed: 42,
        region: EigenRegion::nominal(), order_min: 1, order_max: 10,
        wh_order_min: 1, wh_order_max: 5, mlp_hidden: 32, noise_std: 0.0,
    };
    let cfg = TrainConfig {
        stream: stream.clone(),
        model: ModelSpec::DecoderOnly(DecoderOnlyConfig {
            n_layers: 4, n_heads: 4, d_model: 64, n_ctx: 200, n_u: 1, n_y: 1,
        }),
        n_iterations: iters,
        adamw: AdamWConfig { lr, ..AdamWConfig::default() },
        warmup_iters: 500,
        clip_norm: Some(1.0),
        checkpoint_every: 0,
        log_every: 200,
        warm_start_path: None,
    };
    let t0 = std::time::Instant::now();
    let dir = std::env::temp_dir().join(format!("desk-lr-{lr}"));
    let out = train(&cfg, &dir).unwrap();
    eprint!("{}", std::fs::read_to_string(&out.log_path).unwrap());
    let mut model = MetaModel::from_checkpoint(&out.checkpoint).unwrap();
    let MetaModel::Predictor(ref mut m) = model else { panic!() };
    let report = eval_prediction(m, &stream, 64, 0.0, 7777, 50).unwrap();
    println!("lr={lr} iters={iters}: rmse(skip50)={:.4} noskip={:.4} mae@10={:.4} mae@150={:.4}  [{:.0}s]",
        report.rmse_mean, report.rmse_mean_noskip,
        report.mae_at_step(10).unwrap(), report.mae_at_step(150).unwrap(),
        t0.elapsed().as_secs_f64());
}
