"""Contains the named random sub-streams every experiment draws from.

All randomness flows from one root seed. A stream is identified by its
name (see params.STREAMS) and an optional replicate index, so streams
are independent of the order in which they are requested.
"""

import numpy as np

import params
from otafl import OtaflException


class Streams:
    """Factory of reproducible numpy generators derived from a root
    seed.

    Class instance attributes:
        seed (int): Root seed.

    """

    __slots__ = ("seed",)

    def __init__(self, seed: int) -> None:
        """Initialize a new Streams object.

        Args:
            seed (int): Root seed, a non-negative integer.

        """
        if seed < 0:
            raise InvalidSeedException(
                params.MESSAGES.NON_POSITIVE.format("seed", seed)
            )
        self.seed = seed

    def generator(self, stream: int, replicate: int = 0) -> np.random.Generator:
        """Create the generator of a named sub-stream.

        Args:
            stream (int): Stream identifier from params.STREAMS.
            replicate (int): Replicate index. Defaults to 0.

        Returns:
            numpy.random.Generator: A fresh generator; two calls with
                the same arguments yield identical sequences.

        """
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(stream, replicate)
        )
        return np.random.default_rng(sequence)

    def deployment(self) -> np.random.Generator:
        """Generator of device positions (shared by all replicates)."""
        return self.generator(params.STREAMS.DEPLOYMENT)

    def data(self) -> np.random.Generator:
        """Generator of dataset sampling (shared by all replicates)."""
        return self.generator(params.STREAMS.DATA)

    def fading(self, replicate: int) -> np.random.Generator:
        """Generator of channel fading of one replicate."""
        return self.generator(params.STREAMS.FADING, replicate)

    def noise(self, replicate: int) -> np.random.Generator:
        """Generator of receiver noise of one replicate."""
        return self.generator(params.STREAMS.NOISE, replicate)

    def policy(self, replicate: int) -> np.random.Generator:
        """Generator of policy-internal randomness of one replicate."""
        return self.generator(params.STREAMS.POLICY, replicate)


class InvalidSeedException(OtaflException):
    """Raised when a negative root seed is supplied."""
