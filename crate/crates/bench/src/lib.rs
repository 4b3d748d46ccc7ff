//! Placeholder lib target; the interesting code lives in benches/.
