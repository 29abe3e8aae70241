mod common;

use asymprune::corpus::{EOS, PAD};
use asymprune::generation::{generate, generate_forced, mean_genl, GenerationConfig};
use asymprune::model::{ModelConfig, ModelWeights};
use common::{cache_equivalence, random_case};

fn cfg(max_new_tokens: usize) -> GenerationConfig {
    GenerationConfig {
        max_new_tokens,
        ..GenerationConfig::default()
    }
}

#[test]
fn cached_generation_equals_uncached_on_random_cases() {
    for seed in 0..50 {
        let worst = cache_equivalence(seed).unwrap();
        assert!(worst < 1e-9, "case {seed}: logits differ by {worst}");
    }
}

#[test]
fn forced_lengths_place_eos_and_pad_stragglers() {
    let (w, _) = random_case(3);
    let inputs = vec![vec![5, 6, 7], vec![8, 9], vec![10, 11, 5, 6]];
    let lengths = [2, 5, 3];
    let g = generate_forced(&w, &inputs, &cfg(16), &lengths).unwrap();
    assert_eq!(g.trace.steps(), 5);
    assert_eq!(g.trace.genl, vec![2, 5, 3]);
    for (row, &len) in g.tokens.iter().zip(&lengths) {
        assert_eq!(row.len(), 5);
        assert!(row[..len - 1].iter().all(|&t| t != EOS));
        assert_eq!(row[len - 1], EOS);
        assert!(row[len..].iter().all(|&t| t == PAD));
    }
    assert_eq!(mean_genl(&[g.trace]).unwrap(), 10.0 / 3.0);
}

#[test]
fn eos_at_first_step_stops_immediately() {
    let (w, inputs) = random_case(8);
    let lengths = vec![1; inputs.len()];
    let g = generate_forced(&w, &inputs, &cfg(16), &lengths).unwrap();
    assert_eq!(g.trace.steps(), 1);
    assert!(g.tokens.iter().all(|r| r == &vec![EOS]));
    assert!(g.summaries(EOS).iter().all(Vec::is_empty));
}

#[test]
fn masked_eos_runs_to_the_step_limit() {
    for seed in 0..5 {
        let (w, inputs) = random_case(seed);
        let c = GenerationConfig {
            min_new_tokens: 7,
            ..cfg(7)
        };
        let g = generate(&w, &inputs, &c).unwrap();
        assert_eq!(g.trace.steps(), 7);
        assert!(g.tokens.iter().flatten().all(|&t| t != EOS));
        assert!(g.trace.genl.iter().all(|&l| l == 7));
    }
}

#[test]
fn batching_does_not_change_any_sequence() {
    for seed in 10..20 {
        let (w, mut inputs) = random_case(seed);
        inputs.push(vec![4; 9]);
        let together = generate(&w, &inputs, &cfg(12)).unwrap();
        for (b, input) in inputs.iter().enumerate() {
            let alone = generate(&w, std::slice::from_ref(input), &cfg(12)).unwrap();
            let n = alone.tokens[0].len();
            assert_eq!(&together.tokens[b][..n], &alone.tokens[0][..]);
            assert!(together.tokens[b][n..].iter().all(|&t| t == PAD));
            assert_eq!(together.trace.genl[b], alone.trace.genl[0]);
        }
    }
}

#[test]
fn rejects_bad_requests() {
    let w = ModelWeights::<f64>::init(&ModelConfig::toy(8, 2, 16, 1, 20), 0).unwrap();
    assert!(generate(&w, &[], &cfg(4)).is_err());
    let long = GenerationConfig {
        max_input_len: 3,
        ..cfg(4)
    };
    assert!(generate(&w, &[vec![5, 6, 7, 8]], &long).is_err());
    assert!(generate_forced(&w, &[vec![5]], &cfg(4), &[0]).is_err());
    assert!(generate(&w, &[vec![25]], &cfg(4)).is_err());
}
