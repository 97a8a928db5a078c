//! Modulation acts as a low-pass filter on power-law latents.

use drfuse_core::guidance::{power_law_field, spectral_attenuation_report};
use drfuse_core::numerics::Rng;

#[test]
fn corruption_matches_closed_form_and_rises_with_frequency() {
    let mut rng = Rng::new(17);
    let z = power_law_field(32, 32, 2.0, &mut rng).unwrap();
    let bands = spectral_attenuation_report(&z, 0.02, &mut rng, 1000).unwrap();
    assert!(bands.len() >= 5);
    for b in &bands {
        let rel = (b.corruption - b.predicted).abs() / b.predicted;
        assert!(rel < 0.05, "band [{:.3}, {:.3}): measured {:e}, closed form {:e}", b.band_low, b.band_high, b.corruption, b.predicted);
    }
    for pair in bands.windows(2) {
        assert!(pair[1].corruption > pair[0].corruption, "corruption must rise toward high frequencies");
    }
    assert!(bands.last().unwrap().corruption > 10.0 * bands[0].corruption);
}
