"""Tests package for unshuffle."""
