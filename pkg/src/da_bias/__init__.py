"""Dialog-act guided contextual adapters for a toy transducer ASR stack."""

__version__ = "0.1.0"
