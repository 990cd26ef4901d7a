//! Input encodings: sinusoidal positional encoding, the audio window encoder, and the
//! anchored latent-code volume.

mod audio;
mod latent;
mod positional;

pub use audio::{AudioConfig, AudioEncoder, AudioTrack, AudioWindow, AUDIO_FEATURE_DIM};
pub use latent::{LatentConfig, LatentVolume, LATENT_DIM};
pub(crate) use positional::encode_scalar_into;
pub use positional::{positional_encode, EncoderConfig};
