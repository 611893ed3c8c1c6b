use metasysid_core::nncore::*;
use metasysid_core::seeds::rng_from;
use std::time::Instant;

fn time<F: FnMut()>(label: &str, reps: usize, mut f: F) {
    let t0 = Instant::now();
    for _ in 0..reps { f(); }
    println!("{label}: {:.2} ms", 1000.0 * t0.elapsed().as_secs_f64() / reps as f64);
}

fn main() {
    // raw transcendental speed
    let xs: Vec<f32> = (0..1_000_000).map(|i| (i as f32 * 1e-5) - 5.0).collect();
    let mut acc = 0.0f32;
    time("1M libm tanh", 5, || { acc += xs.iter().map(|v| v.tanh()).sum::<f32>(); });
    time("1M fast tanh", 5, || { acc += xs.iter().map(|v| fast_tanh_f32(*v)).sum::<f32>(); });
    println!("(sink {acc})");

    let mut rng = rng_from(1);
    let (b, t, d) = (16usize, 200usize, 64usize);
    let x = gaussian_tensor::<f32, _>(&mut rng, &[b, t, d], 1.0);
    let mut fc1 = Linear::<f32>::init(&mut rng, d, 4 * d, 0.02);
    let h = fc1.forward(&x).unwrap();

    let mut gelu = Gelu::<f32>::new();
    time("gelu fwd [16,200,256]", 50, || { gelu.forward(&h); });
    time("gelu bwd", 50, || { gelu.backward(&h); });

    let mut attn = ScaledDotAttention::<f32>::new(4, MaskMode::Causal);
    time("attn core fwd", 50, || { attn.forward(&x, &x, &x).unwrap(); });
    attn.forward(&x, &x, &x).unwrap();
    time("attn core bwd", 50, || { attn.backward(&x); });

    let mut lin = Linear::<f32>::init(&mut rng, d, d, 0.02);
    let y = lin.forward(&x).unwrap();
    time("linear d->d fwd", 50, || { lin.forward(&x).unwrap(); });
    time("linear d->d bwd", 50, || { lin.backward(&y); });
    time("fc1 fwd", 50, || { fc1.forward(&x).unwrap(); });
    time("fc1 bwd", 50, || { fc1.backward(&h); });
}
