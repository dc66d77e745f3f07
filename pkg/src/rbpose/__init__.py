"""Rao-Blackwellized particle filtering for 6D object pose tracking."""
