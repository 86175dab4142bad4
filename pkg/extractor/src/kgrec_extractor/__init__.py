"""kgrec-extractor: images to kgrec feature files via a frozen backbone."""

from .extract import ExtractionManifest, extract, load_backbone

__version__ = "0.1.0"
