"""
Tests package for pyeqprop.
"""

