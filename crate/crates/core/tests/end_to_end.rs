use orchard_core::eval::evaluate;
use orchard_core::graph::GraphSnapshot;
use orchard_core::io::{read_frame_log, read_tree_map, write_frame_log, write_tree_map};
use orchard_core::{run_pipeline, FactorGraph, PipelineConfig, Scenario, SolveMode, Toggles};

fn small(preset: &str, n: usize, seed: u64) -> Scenario {
    let mut s = Scenario::preset(preset).unwrap().with_seed(seed);
    s.orchard.n_trees = n;
    s
}

#[test]
fn noiseless_row_is_recovered() {
    let scn = small("noiseless", 20, 0);
    let sim = scn.run().unwrap();
    let cfg = PipelineConfig::for_scenario(&scn, sim.true_poses[0].theta);
    let out = run_pipeline(&sim.frames, &cfg).unwrap();
    let r = evaluate(&out.map, &sim.surveyed, 0.55, 1.1);
    assert_eq!((r.tp, r.fp, r.fn_), (sim.surveyed.len(), 0, 0));
    assert!(r.mean_tp_error < 1e-3, "{}", r.mean_tp_error);
    for ((_, est), truth) in out.trajectory.iter().zip(&sim.true_poses) {
        assert!(est.position().distance(&truth.position()) < 1e-3);
    }
}

#[test]
fn logged_frames_replay_identically() {
    let scn = small("pear-row", 12, 4);
    let sim = scn.run().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("frames.jsonl");
    write_frame_log(&log, &sim.frames).unwrap();
    let back = read_frame_log(&log).unwrap();
    assert_eq!(back, sim.frames);

    let cfg = PipelineConfig::for_scenario(&scn, sim.true_poses[0].theta);
    let a = run_pipeline(&sim.frames, &cfg).unwrap();
    let b = run_pipeline(&back, &cfg).unwrap();
    assert_eq!(a.map, b.map);

    let map = dir.path().join("map.csv");
    write_tree_map(&map, &a.map).unwrap();
    assert_eq!(read_tree_map(&map).unwrap().points(), a.map.points());
}

#[test]
fn graph_snapshot_resolves_to_the_same_estimate() {
    let scn = small("pear-row", 10, 1);
    let sim = scn.run().unwrap();
    let cfg = PipelineConfig::for_scenario(&scn, sim.true_poses[0].theta);
    let out = run_pipeline(&sim.frames, &cfg).unwrap();
    let text = serde_json::to_string(&out.graph.snapshot()).unwrap();
    let snap: GraphSnapshot = serde_json::from_str(&text).unwrap();
    let mut g = FactorGraph::from_snapshot(&snap).unwrap();
    let rep = g.optimize(SolveMode::Incremental).unwrap();
    let (dp, da) = rep.estimates.max_difference(out.graph.estimate());
    assert!(dp < 1e-6 && da < 1e-6, "{dp} {da}");
}

#[test]
fn toggles_change_the_graph_not_the_log() {
    let scn = small("pear-row", 10, 2);
    let sim = scn.run().unwrap();
    let base = PipelineConfig::for_scenario(&scn, sim.true_poses[0].theta);
    let off = PipelineConfig {
        toggles: Toggles {
            inter_distance: false,
            ..Toggles::default()
        },
        ..base.clone()
    };
    let with = run_pipeline(&sim.frames, &base).unwrap();
    let without = run_pipeline(&sim.frames, &off).unwrap();
    let count = |o: &orchard_core::PipelineOutput| o.graph.num_factors(orchard_core::FactorKind::InterDistance);
    assert!(count(&with) > 0);
    assert_eq!(count(&without), 0);
    assert_eq!(with.stats.detections_logged, without.stats.detections_logged);
}
