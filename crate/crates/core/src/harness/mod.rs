//! Scenarios, baseline controller, and experiments.
