"""This package contains integration tests for the otafl simulator.
They are skipped unless OTAFL_SLOW_TESTS or OTAFL_MNIST_DIR is set.
"""
