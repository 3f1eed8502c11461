//! Recordings, preprocessing and the split-then-segment protocol.

mod access;
mod preprocess;
mod recording;
mod segment;

pub use access::{AccessEntry, AccessLog, Sample};
pub use preprocess::{
    apply_stats, average_reference, average_reference_in_place, channel_stats, downsample, highpass,
    highpass_in_place, preprocess, standardize, ChannelStats, PipelineConfig, Standardization,
};
pub use recording::{meta_path, session_key, Recording, RecordingMeta, TrialMarker, CLASS_NAMES, NUM_CLASSES};
pub use segment::{
    partition_trials, prepare_session, preprocess_for_split, segment, segment_trial, split, window_samples, MiniTrial, SessionData,
    Split, SplitSpec, TrialPartition,
};
