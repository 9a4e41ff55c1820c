"""Depression risk prediction by fine-tuning a small language model on tabular records rendered as prompts."""

__version__ = "0.1.0"
