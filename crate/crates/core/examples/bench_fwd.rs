use std::time::Instant;
fn main() {
    for (l, d, dm, h) in [(4usize, 48usize, 192usize, 4usize), (4, 64, 256, 4), (2, 32, 128, 4)] {
        let cfg = wilke_core::ModelConfig::byte(l, d, dm, h);
        let m = wilke_core::Model::random(cfg, &mut wilke_core::rng::rng_for(1, "b", 0)).unwrap();
        let toks: Vec<u32> = (0..20u32).map(|i| 97 + (i % 20)).collect();
        let t0 = Instant::now();
        let n = 300;
        for _ in 0..n { let _ = wilke_core::model::forward(&m, &toks).unwrap(); }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        println!("L{l} d{d} dm{dm}: fwd seq20 = {:.3} ms  ({:.0} fwd/s)", dt*1e3, 1.0/dt);
    }
}
