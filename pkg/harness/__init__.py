"""Experiment harness: configuration, problem library, outer loops."""
