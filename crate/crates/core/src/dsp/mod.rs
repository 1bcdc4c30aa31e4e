//! Signal processing: STFT/iSTFT, mel frames, patches, energy weights and WAV I/O.

mod energy;
mod mel;
mod patch;
mod stft;
mod wav;

pub use energy::{frame_energy, EnergyWeighting};
pub use mel::{hz_to_mel, log_mel_from_magnitude, mel, mel_to_hz, MelConfig};
pub use patch::{patchify, unpatchify, PatchGrid};
pub use stft::{hann, istft, stft, synthesis_basis, window_envelope, IrfftFrames, SpectroFrame, StftPlan};
pub use wav::{read_wav, write_wav};

/// Round-trip signal-to-noise ratio in dB.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let sig: f64 = reference.iter().map(|v| v * v).sum();
    let err: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (sig / err.max(f64::MIN_POSITIVE)).log10()
}
