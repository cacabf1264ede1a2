"""vaultlog: encrypted, append-only audit logging with a threshold-shared decryption key."""

from .errors import VaultlogError
from .field import FieldElement, Polynomial, PrimeField, production_field
from .sharing import SecretValue, Share, ThresholdParams
from .policy import Ceremony, KeyFragmentationPlan, Policy, evaluate, fragment_key, reconstruct_key
from .envelope import KeyPair, PublicKey, decrypt_record, encrypt_record, keygen
from .store import ChainStore, StoreHead
from .service import LogEvent, Site

__version__ = "0.1.0"
