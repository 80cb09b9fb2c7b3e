"""Chunked intra/inter-gloss attention recognizer with CTC alignment and WER scoring."""

__version__ = "0.1.0"
