class ExportError(Exception):
    """Anything that stops an export: bad model names, incompatible
    vocabularies, oversized inputs, non-finite captures."""
