use std::time::Instant;
use coopbev::attention::fuse::FusionOrder;
use coopbev::config::ExperimentConfig;
use coopbev::metrics::{compute_amota_amotp, compute_map};
use coopbev::model::{Model, Variant};
use coopbev::sim::channel::pair_frames;
use coopbev::sim::scenario::{generate_scenario, ScenarioPreset, ScenarioSpec};
use coopbev::experiment::{train_on_scenario, run_inference};
use coopbev::tracker::DetectionRecord;

fn main() {
    let mut cfg = ExperimentConfig::acceptance();
    cfg.train.epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let spec = ScenarioSpec { preset: ScenarioPreset::Intersection, rate_hz: 5.0, duration_s: 4.0, seed: 1 };
    let scenario = generate_scenario(&spec).unwrap();
    let gt_frames: Vec<Vec<_>> = scenario.frames.iter().map(|f| f.gt.clone()).collect();
    let ego_roi = scenario.agents[0].roi;
    let other_roi = scenario.agents[1].roi;

    let mut tc = cfg.train.clone();
    tc.seed = 1;
    let t0 = Instant::now();
    let mut model = Model::new(&cfg.model, Variant::XetV2x, 1).unwrap();
    let curve = train_on_scenario(&mut model, &scenario, FusionOrder::ImageFirst, &tc).unwrap();
    println!("trained in {:.1}s, loss {:.3} -> {:.3}", t0.elapsed().as_secs_f64(), curve[0].1, curve.last().unwrap().1);

    let frames = pair_frames(&scenario, 0).unwrap();
    let outs = run_inference(&model, &frames, &ego_roi, Some(&other_roi), FusionOrder::ImageFirst).unwrap();
    let det_frames: Vec<Vec<DetectionRecord>> = outs.iter().map(|f| f.records.clone()).collect();
    let m = compute_map(&det_frames, &gt_frames, &cfg.eval).unwrap();
    let mt = compute_amota_amotp(&det_frames, &gt_frames, &cfg.eval).unwrap();
    println!("WITH history: map={:.3?} amota={:.3?} per-class={:?}", m.mean_ap, mt.amota, m.per_class);
    for k in [5usize, 12, 19] {
        println!("  k{k} GT={:?}", gt_frames[k].iter().map(|g| format!("{:?}@{:.1},{:.1}", g.class, g.position[0], g.position[1])).collect::<Vec<_>>());
        println!("  k{k} D ={:?}", det_frames[k].iter().map(|r| format!("{:?}#{}@{:.1},{:.1} s{:.2}", r.class, r.track_id.unwrap_or(0), r.position[0], r.position[1], r.score)).collect::<Vec<_>>());
    }
}
