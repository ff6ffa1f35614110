//! Attach adapters, show that attachment is an exact no-op, perturb them,
//! then fold them into the base weights and compare outputs.

use dvllama::lora::{attach_targets, merge_all, LoraConfig};
use dvllama::model::{DvLlama, ModelConfig};
use dvllama::numerics::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits(m: &DvLlama<f32>, tokens: &[usize]) -> dvllama::Result<Tensor<f32>> {
    let mut g = Graph::inference(&m.params);
    let x = m.arch.embed_text(&mut g, tokens)?;
    let y = m.arch.decode(&mut g, x)?;
    Ok(g.value(y).clone())
}

fn main() -> dvllama::Result<()> {
    let mut model = DvLlama::<f32>::new(ModelConfig::default())?;
    let prompt = [1, 40, 41, 42, 3];
    let base = logits(&model, &prompt)?;

    attach_targets(&mut model, LoraConfig::default())?;
    let attached = logits(&model, &prompt)?;
    println!("max |attached - base| = {:e}", attached.max_abs_diff(&base));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids: Vec<_> = model
        .arch
        .lora
        .as_ref()
        .expect("attached")
        .adapters()
        .map(|a| a.b)
        .collect();
    for id in ids {
        for v in model.params.get_mut(id).value.data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
    let merged = merge_all(&model)?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(1..12);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..512)).collect();
        worst = worst.max(logits(&model, &tokens)?.max_abs_diff(&logits(&merged, &tokens)?));
    }
    println!("adapted vs base: {:.3e}", logits(&model, &prompt)?.max_abs_diff(&base));
    println!("merged vs adapted, worst of 100 inputs: {worst:.3e}");
    println!(
        "parameters: adapted {}, merged {}",
        model.params.len(),
        merged.params.len()
    );
    Ok(())
}
