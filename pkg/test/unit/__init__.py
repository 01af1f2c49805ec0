"""This package contains unit tests for the otafl simulator."""
