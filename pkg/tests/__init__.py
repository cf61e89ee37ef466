"""Tests for Forecast Dynamics."""
