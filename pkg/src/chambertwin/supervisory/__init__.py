"""Compliance layer: accounts and sessions, tamper-evident audit, alarms."""
from .alarms import (
    ACKED,
    ACTIVE,
    CLEARED,
    KINDS,
    AlarmEngine,
    AlarmRecord,
    ChamberSignals,
    OutboxNotifier,
    TransitionError,
)
from .audit import GENESIS, AuditIntegrityError, AuditLog, AuditRecord
from .auth import (
    ADMINISTRATOR,
    OPERATOR,
    PERMISSION_MATRIX,
    SUPERVISOR,
    AuthError,
    Forbidden,
    InvariantError,
    Session,
    SessionStore,
    UserAccount,
    UserStore,
    authorize,
    role_at_least,
)

__all__ = [
    "ACKED",
    "ACTIVE",
    "ADMINISTRATOR",
    "CLEARED",
    "GENESIS",
    "KINDS",
    "OPERATOR",
    "PERMISSION_MATRIX",
    "SUPERVISOR",
    "AlarmEngine",
    "AlarmRecord",
    "AuditIntegrityError",
    "AuditLog",
    "AuditRecord",
    "AuthError",
    "ChamberSignals",
    "Forbidden",
    "InvariantError",
    "OutboxNotifier",
    "Session",
    "SessionStore",
    "TransitionError",
    "UserAccount",
    "UserStore",
    "authorize",
    "role_at_least",
]
