"""Test suite for causalbench."""
