use goal_core::nav::{
    run_episode, sample_episodes, EpisodeConfig, NearestFrontierPolicy, OracleMapPolicy,
};
use goal_core::scene::{benchmark_goals, benchmark_spec, generate_scene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let spec = benchmark_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (scene, _) = generate_scene(&spec, &mut rng).unwrap();
    let scenes = [scene];
    let episodes =
        sample_episodes(&scenes, &benchmark_goals(), 10, 1.0, 3.5, &mut rng).unwrap();
    let cfg = EpisodeConfig {
        max_steps: 600,
        ..EpisodeConfig::default()
    };
    for (i, ep) in episodes.iter().enumerate() {
        let rec = run_episode(
            &scenes[0],
            ep.start,
            ep.goal_channel,
            &OracleMapPolicy { scene: &scenes[0] },
            &cfg,
            &mut rng,
        )
        .unwrap();
        println!(
            "ep {i}: goal {} start {:?} success {} steps {} moved {:.0} l* {:.2}m final {:.2}m",
            ep.goal_channel,
            ep.start,
            rec.success,
            rec.steps_used,
            rec.path_length_m / 0.05,
            rec.shortest_length_m,
            rec.final_goal_distance_m
        );
        let frec = run_episode(
            &scenes[0],
            ep.start,
            ep.goal_channel,
            &NearestFrontierPolicy,
            &cfg,
            &mut rng,
        )
        .unwrap();
        println!("   frontier: success {} steps {}", frec.success, frec.steps_used);
    }
}
