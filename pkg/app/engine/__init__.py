"""Numerical engine of the laboratory: geometry, channel, matching, learners and harness."""
