use goal_core::flow::{NetConfig, VelocityNet, euler_sample};
use ndarray::Array3;
use rand::SeedableRng;
use std::time::Instant;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for widths in [vec![16, 32, 32, 16], vec![32, 64, 64, 32]] {
        let cfg = NetConfig { channels: 8, hidden: widths.clone(), time_dim: 32, time_hidden: 64 };
        let net = VelocityNet::<f32>::init(cfg, &mut rng);
        println!("widths {:?}: {} params", widths, net.param_count());
        let x = Array3::<f32>::zeros((8, 64, 64));
        // warmup
        let _ = net.forward(&x, 0.5).unwrap();
        let t0 = Instant::now();
        let reps = 30;
        for _ in 0..reps {
            let _ = net.forward(&x, 0.5).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        println!("  forward 64x64: {:.2} ms", dt * 1e3);
        let t0 = Instant::now();
        let _ = euler_sample(&net, &x, 96).unwrap();
        println!("  euler n=96: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);
    }
}
