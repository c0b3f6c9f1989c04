use aple_core::encoders::{
    encode_image, encode_text, init_prompts, patchify, EncoderWeights, InitMode, ModelConfig, Side, TextTower,
    Vocabulary,
};
use aple_core::image_adapter::{AdapterConfig, ImageGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(side: usize, seed: u64) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageGrid::new(side, side, 3, (0..3 * side * side).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn full_scale_preset_text_feature_width() {
    let cfg = ModelConfig::full_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Only the text tower is needed for this check.
    let text = TextTower::init(&cfg, &mut rng).unwrap();
    let vocab = Vocabulary::new(["circle"]);
    let q = vocab.tokenize("a photo of a circle.", cfg.max_text_len);
    let z = encode_text(&text, &cfg, &q, None).unwrap();
    assert_eq!(z.shape(), &[512]);
    assert!(z.is_finite());
}

#[test]
fn full_scale_preset_patch_grid() {
    let cfg = ModelConfig::full_scale();
    let p = patchify(&image(224, 1), &cfg).unwrap();
    assert_eq!(p.rows(), 196);
}

#[test]
fn desk_outputs_are_finite_for_every_prompt_setting() {
    let cfg = ModelConfig::desk();
    let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let vocab = Vocabulary::new(["red circle", "blue square"]);
    let q = vocab.tokenize("a photo of a red circle.", cfg.max_text_len);
    let adapter = AdapterConfig::default();
    for m in [0, 1, 2, 4, 8] {
        for mode in [InitMode::RandomGauss, InitMode::EmbedText] {
            let pack = init_prompts(&cfg, m, 3, mode, &w.text, &vocab).unwrap();
            assert!(encode_text(&w.text, &cfg, &q, Some(&pack)).unwrap().is_finite());
            for a in [None, Some(&adapter)] {
                let f = encode_image(&w.vision, &cfg, &image(32, m as u64), Some(&pack), a).unwrap();
                assert!(f.is_finite());
                assert_eq!(f.shape(), &[cfg.d_joint]);
            }
        }
    }
}

#[test]
fn each_tower_reads_only_its_own_prompts() {
    let cfg = ModelConfig::desk();
    let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let vocab = Vocabulary::new(["blue checker"]);
    let q = vocab.tokenize("a photo of a blue checker.", cfg.max_text_len);
    let img = image(32, 5);
    let pack = init_prompts(&cfg, 2, 6, InitMode::RandomGauss, &w.text, &vocab).unwrap();
    let text0 = encode_text(&w.text, &cfg, &q, Some(&pack)).unwrap();
    let img0 = encode_image(&w.vision, &cfg, &img, Some(&pack), None).unwrap();
    for side in [Side::Language, Side::Vision] {
        for layer in 0..cfg.prompted_layers() {
            let mut p = pack.clone();
            p.side_mut(side)[layer].data_mut()[0] += 0.5;
            let t = encode_text(&w.text, &cfg, &q, Some(&p)).unwrap();
            let f = encode_image(&w.vision, &cfg, &img, Some(&p), None).unwrap();
            assert_eq!(t.data() == text0.data(), side == Side::Vision, "{side:?} layer {layer}");
            assert_eq!(f.data() == img0.data(), side == Side::Language, "{side:?} layer {layer}");
        }
    }
}
