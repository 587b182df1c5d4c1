//! Receding-horizon demonstration following.
