//! Codebook mechanics: nearest-code and Gumbel assignment, perplexity,
//! dead-code re-initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vq_sign::vq::{
    dead_code_threshold, quantize_gumbel, quantize_hard, reinit_dead_codes, usage_perplexity, Codebook, GumbelSchedule,
};

fn main() -> vq_sign::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut book = Codebook::new("demo", 64, 8, &mut rng);
    // encoder outputs clustered around four points
    let centers = ndarray::Array2::from_shape_fn((4, 8), |(i, j)| if i == j { 1.0 } else { 0.0 });
    let z = ndarray::Array2::from_shape_fn((512, 8), |(r, c)| centers[[r % 4, c]] + 0.05 * ((r * 7 + c) % 11) as f64);

    let hard = quantize_hard(&z, &mut book)?;
    println!("hard assignment perplexity {:.2} of {}", usage_perplexity(&hard.indices, book.size()), book.size());

    let mut schedule = GumbelSchedule::default();
    for step in [0u64, 500, 2000] {
        schedule.current_step = step;
        let soft = quantize_gumbel(&z, &mut book, &schedule, &mut rng)?;
        println!(
            "gumbel at step {step:>4} (tau {:.3}): perplexity {:.2}",
            schedule.temperature(),
            usage_perplexity(&soft.indices, book.size())
        );
    }

    book.reset_usage();
    quantize_hard(&z, &mut book)?;
    let threshold = dead_code_threshold(book.usage.iter().sum(), book.size(), 0.01);
    let replaced = reinit_dead_codes(&mut book, &z, threshold, 8, &mut rng)?;
    book.reset_usage();
    let after = quantize_hard(&z, &mut book)?;
    println!(
        "re-seeded {replaced} dead codes; hard perplexity now {:.2}",
        usage_perplexity(&after.indices, book.size())
    );
    Ok(())
}
