"""
Error hierarchy for the retrieval toolkit.

Every hard failure raised by the pipeline derives from ToolkitError,
so the CLI can map it to a nonzero exit code in one place.
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


# ============================
# CONFIGURATION
# ============================

class ConfigError(ToolkitError):
    pass


# ============================
# INGESTION
# ============================

class MissingInclude(ToolkitError):
    def __init__(self, path: str, included_from: str):
        super().__init__(f"Included file not found: {path} (from {included_from})")
        self.path = path
        self.included_from = included_from


class IncludeCycle(ToolkitError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("Include cycle: " + " -> ".join(self.cycle))


class AssetMissing(ToolkitError):
    def __init__(self, ref: str):
        super().__init__(f"Figure asset not found: {ref}")
        self.ref = ref


class UnreadableProject(ToolkitError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"Cannot read project {path}: {reason}")
        self.path = path


# ============================
# REPRESENTATIONS
# ============================

class EmptyPages(ToolkitError):
    pass


# ============================
# EMBEDDING / SERVICES
# ============================

class ModalityMismatch(ToolkitError):
    pass


class ServiceError(ToolkitError):
    """Transport or remote failure talking to an external service."""


class ProviderError(ServiceError):
    """Embedding provider failure."""


class ImageDecodeError(ToolkitError):
    pass


# ============================
# INDEX STORE
# ============================

class IndexFormatError(ToolkitError):
    pass


class FormatVersionMismatch(IndexFormatError):
    pass


class ChecksumMismatch(IndexFormatError):
    pass


# ============================
# RETRIEVAL
# ============================

class DimensionMismatch(ToolkitError):
    pass


class ModeMismatch(ToolkitError):
    pass


# ============================
# QUERIES / EVALUATION
# ============================

class GoldMissing(ToolkitError):
    def __init__(self, query_id: str, gold_doc_id: str):
        super().__init__(
            f"Gold document {gold_doc_id!r} of query {query_id!r} is not in the corpus"
        )
        self.query_id = query_id
        self.gold_doc_id = gold_doc_id


class MalformedVerdict(ToolkitError):
    pass


class StageError(ToolkitError):
    pass


class TooShort(ToolkitError):
    pass
