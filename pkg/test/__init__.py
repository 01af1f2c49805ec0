"""This package contains unit and integration tests for the otafl
simulator.
"""
