//! Audio I/O, mixing, labelling and the synthetic corpus.

mod mix;
mod synth;
mod wav;

pub use mix::{dctirm, mix_at_snr, power, snr_db, vad_labels, MixtureExample, MASK_EPS, VAD_FLOOR_DB};
pub use synth::{
    synth_dataset, synth_example, synth_noise, synth_speech, DatasetManifest, ManifestItem, NoiseKind, Split,
    SynthSpec, ACTIVITY_RANGE, MANIFEST_FILE, MIN_GAP_S,
};
pub use wav::{from_pcm16, read_wav, read_wav_from, to_pcm16, write_wav, write_wav_to, SampleFormat};
