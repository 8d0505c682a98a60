from .export import (
    ExportError,
    ExportManifest,
    export_table,
    tokenize_corpus,
    tokenizer_fingerprint,
    write_embt,
)

__version__ = "0.1.0"
