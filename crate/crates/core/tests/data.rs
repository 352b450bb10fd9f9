use mtm_core::data::{render_pose, sample_dataset, sample_video, PoseParams};
use mtm_core::Rng;
use proptest::prelude::*;

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn pose_diversity_has_spread() {
    let ds = sample_dataset(100, 11, 16).unwrap();
    let mut d = vec![];
    for i in 0..100 {
        for j in i + 1..100 {
            d.push(l2(ds.images.outer_slice(i), ds.images.outer_slice(j)));
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
    let cov = var.sqrt() / mean;
    assert!(cov > 0.1, "coefficient of variation {cov}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rendered_poses_are_two_valued_and_pure(seed in any::<u64>(), res in prop::sample::select(vec![8usize, 16, 32])) {
        let pose = PoseParams::sample(&mut Rng::new(seed));
        prop_assert!(pose.validate().is_ok());
        let img = render_pose(&pose, res).unwrap();
        let d = img.data();
        prop_assert!(d.iter().all(|v| (-1.0..=1.0).contains(v)));
        let (lo, hi) = d.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(lo < 0.0 && hi > 0.0);
        let again = render_pose(&pose, res).unwrap();
        prop_assert_eq!(img.data(), again.data());
    }

    #[test]
    fn video_frames_stay_valid(seed in any::<u64>(), frames in 1usize..8) {
        let clip = sample_video(seed, frames, 16).unwrap();
        prop_assert_eq!(clip.frames.shape(), &[frames, 1, 16, 16][..]);
        for t in 0..frames {
            prop_assert!(clip.motion.advance(&clip.pose, t).validate().is_ok());
        }
    }
}
