//! Continuous-side references (in progress).
