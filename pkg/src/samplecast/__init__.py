"""samplecast: deadline-constrained reliable transport of large
fragmented samples over lossy links, with a deterministic discrete-event
simulator for evaluating the protocol family."""

__version__ = "0.1.0"

from .stream import (  # noqa: F401
    Fragment,
    FragmentBitmap,
    Sample,
    StreamConfig,
    fragment_sample,
    min_slots,
    reassemble,
)
