"""Tests for model_uncertainty package."""
