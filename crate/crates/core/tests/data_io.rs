mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use spanproto::synthetic::generate_synthetic;
use spanproto::{read_episodes, write_episodes, EpisodeDataset, GeneratorConfig, Split};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_then_read_is_identity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let episodes = (0..r.random_range(1..=4))
            .map(|_| {
                let ways = r.random_range(1..=3);
                random_episode(&mut r, ways, 7, 2, 3)
            })
            .collect();
        let data = EpisodeDataset::new(Split::Dev, episodes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        write_episodes(&data, &path).unwrap();
        prop_assert_eq!(read_episodes(&path).unwrap().episodes, data.episodes);
    }

    #[test]
    fn generation_is_a_function_of_config_and_seed(seed in any::<u64>(), prob in 0.0f64..=1.0) {
        let config = GeneratorConfig { episodes: 3, distractor_prob: prob, ..Default::default() };
        let a = generate_synthetic(&config, seed).unwrap();
        let b = generate_synthetic(&config, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
