//! Times encoder forward/backward passes at the default configuration.

use std::sync::Arc;
use std::time::Instant;

use jepa_rl::cartpole::{render, CartState};
use jepa_rl::observation::{ObservationWindow, WindowKind};
use jepa_rl::vit::{EncoderConfig, VitEncoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let enc = VitEncoder::new(EncoderConfig::default()).unwrap();
    let p: Vec<f32> = enc.layout().init(&mut ChaCha8Rng::seed_from_u64(0));
    let batch: usize = std::env::var("BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(128);
    let windows: Vec<ObservationWindow> = (0..batch)
        .map(|k| {
            let s = CartState {
                x: k as f64 * 0.01,
                theta: 0.05,
                ..Default::default()
            };
            let f = Arc::new(render(&s));
            ObservationWindow::new(WindowKind::X, [f.clone(), f.clone(), f]).unwrap()
        })
        .collect();
    let refs: Vec<&ObservationWindow> = windows.iter().collect();
    let reps: usize = std::env::var("REPS").ok().and_then(|v| v.parse().ok()).unwrap_or(5);
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(enc.encode(&p, &refs).unwrap());
    }
    let fwd = t.elapsed().as_secs_f64() / reps as f64;
    let t = Instant::now();
    let mut grads = vec![0.0f32; p.len()];
    for _ in 0..reps {
        let (s, cache) = enc.forward(&p, &refs).unwrap();
        enc.backward(&p, &cache, &s, &mut grads);
    }
    let fb = t.elapsed().as_secs_f64() / reps as f64;
    let t = Instant::now();
    for _ in 0..50 {
        std::hint::black_box(enc.encode(&p, &refs[..1]).unwrap());
    }
    let single = t.elapsed().as_secs_f64() / 50.0;
    println!("params={} batch={batch}", enc.num_params());
    println!(
        "forward        {:.1} ms/batch  {:.3} ms/sample",
        fwd * 1e3,
        fwd * 1e3 / batch as f64
    );
    println!(
        "forward+back   {:.1} ms/batch  {:.3} ms/sample",
        fb * 1e3,
        fb * 1e3 / batch as f64
    );
    println!("single forward {:.3} ms", single * 1e3);
}
