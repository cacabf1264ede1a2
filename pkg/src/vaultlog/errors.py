"""Exception hierarchy shared by every layer.

The CLI maps these onto its exit codes, so each class carries the code it
should surface as.
"""


class VaultlogError(Exception):
    exit_code = 1


class FieldError(VaultlogError):
    """Bad field parameters, mixed fields, or inversion of zero."""


class SingularMatrixError(FieldError):
    pass


class SharingError(VaultlogError):
    pass


class InsufficientSharesError(SharingError):
    pass


class ShareMismatchError(SharingError):
    """Shares from different splits, fields or parameter sets were mixed."""


class CorruptShareError(SharingError):
    exit_code = 2


class InconsistentSharesError(SharingError):
    exit_code = 2


class PolicyError(VaultlogError):
    pass


class PolicyUnsatisfiedError(PolicyError):
    exit_code = 4


class CeremonyError(VaultlogError):
    pass


class CryptoError(VaultlogError):
    exit_code = 5


class IntegrityError(VaultlogError):
    exit_code = 2


class StoreError(VaultlogError):
    exit_code = 3


class SiteError(VaultlogError):
    pass
