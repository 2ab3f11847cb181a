"""Feedback synthesis from non-smooth value functions."""
