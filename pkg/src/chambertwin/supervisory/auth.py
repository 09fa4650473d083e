"""Accounts, roles, sessions, and the permission matrix.

Three roles, strictly ordered: Operator (monitor only), Supervisor (may
change operating parameters and acknowledge alarms), Administrator (may
additionally manage users, controller gains, and trigger tuning). Every
action name has a defined minimum role; unknown actions are denied for
everyone, so a typo fails closed.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import os
import secrets
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

OPERATOR = "Operator"
SUPERVISOR = "Supervisor"
ADMINISTRATOR = "Administrator"
ROLES = (OPERATOR, SUPERVISOR, ADMINISTRATOR)
_RANK = {role: i for i, role in enumerate(ROLES)}

# minimum role per action; reads are allowed to any authenticated session
PERMISSION_MATRIX: dict[str, str] = {
    "samples.read": OPERATOR,
    "alarms.read": OPERATOR,
    "report.read": OPERATOR,
    "audit.read": OPERATOR,
    "live.read": OPERATOR,
    "setpoints.read": OPERATOR,
    "users.read": ADMINISTRATOR,
    "setpoint.write": SUPERVISOR,
    "alarm.ack": SUPERVISOR,
    "samples.ingest": SUPERVISOR,
    "user.manage": ADMINISTRATOR,
    "gains.write": ADMINISTRATOR,
    "tuning.trigger": ADMINISTRATOR,
}

SESSION_TTL_S = 12 * 3600
_PBKDF2_ITERATIONS = 60_000


class AuthError(Exception):
    """Unknown, expired, or otherwise unusable credentials (HTTP 401)."""


class Forbidden(Exception):
    """Authenticated but not allowed to do this (HTTP 403)."""


class InvariantError(Exception):
    """The change would leave the account set in an illegal state."""


def role_at_least(role: str, minimum: str) -> bool:
    return _RANK[role] >= _RANK[minimum]


def authorize(role: str, action: str) -> bool:
    minimum = PERMISSION_MATRIX.get(action)
    if minimum is None:
        return False
    return role_at_least(role, minimum)


@dataclass(frozen=True)
class UserAccount:
    username: str
    role: str
    salt: bytes
    pw_hash: bytes
    active: bool = True


def _hash_password(password: str, salt: bytes) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, _PBKDF2_ITERATIONS)


class UserStore:
    """Accounts persisted as JSON; guarantees one active Administrator."""

    def __init__(self, path: str | Path | None = None) -> None:
        self._path = Path(path) if path else None
        self._users: dict[str, UserAccount] = {}
        if self._path is not None and self._path.exists():
            self._load()

    def _load(self) -> None:
        doc = json.loads(self._path.read_text())
        for entry in doc["users"]:
            account = UserAccount(
                username=entry["username"],
                role=entry["role"],
                salt=bytes.fromhex(entry["salt"]),
                pw_hash=bytes.fromhex(entry["pw_hash"]),
                active=entry["active"],
            )
            self._users[account.username] = account

    def _save(self) -> None:
        if self._path is None:
            return
        doc = {
            "users": [
                {
                    "username": u.username,
                    "role": u.role,
                    "salt": u.salt.hex(),
                    "pw_hash": u.pw_hash.hex(),
                    "active": u.active,
                }
                for u in self._users.values()
            ]
        }
        tmp = self._path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2))
        os.replace(tmp, self._path)

    def __contains__(self, username: str) -> bool:
        return username in self._users

    def get(self, username: str) -> UserAccount | None:
        return self._users.get(username)

    def list_users(self) -> list[UserAccount]:
        return sorted(self._users.values(), key=lambda u: u.username)

    def add_user(self, username: str, password: str, role: str) -> UserAccount:
        if not username or "|" in username or "\n" in username:
            raise ValueError(f"illegal username {username!r}")
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        if username in self._users:
            raise ValueError(f"username {username!r} already exists")
        if len(password) < 8:
            raise ValueError("password must be at least 8 characters")
        salt = secrets.token_bytes(16)
        account = UserAccount(username, role, salt, _hash_password(password, salt))
        self._users[username] = account
        self._save()
        return account

    def verify(self, username: str, password: str) -> UserAccount | None:
        account = self._users.get(username)
        if account is None or not account.active:
            return None
        candidate = _hash_password(password, account.salt)
        if hmac.compare_digest(candidate, account.pw_hash):
            return account
        return None

    def set_password(self, username: str, password: str) -> None:
        account = self._require(username)
        if len(password) < 8:
            raise ValueError("password must be at least 8 characters")
        salt = secrets.token_bytes(16)
        self._users[username] = replace(
            account, salt=salt, pw_hash=_hash_password(password, salt)
        )
        self._save()

    def set_role(self, username: str, role: str) -> None:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        account = self._require(username)
        self._guard_last_admin(username, becoming_admin=role == ADMINISTRATOR)
        self._users[username] = replace(account, role=role)
        self._save()

    def deactivate(self, username: str) -> None:
        account = self._require(username)
        self._guard_last_admin(username)
        self._users[username] = replace(account, active=False)
        self._save()

    def activate(self, username: str) -> None:
        account = self._require(username)
        self._users[username] = replace(account, active=True)
        self._save()

    def delete_user(self, username: str) -> None:
        self._require(username)
        self._guard_last_admin(username)
        del self._users[username]
        self._save()

    def _require(self, username: str) -> UserAccount:
        account = self._users.get(username)
        if account is None:
            raise KeyError(f"no such user {username!r}")
        return account

    def _guard_last_admin(self, username: str, becoming_admin: bool = False) -> None:
        """Refuse a change that would leave zero active Administrators."""
        if becoming_admin:
            return
        admins = [
            u.username
            for u in self._users.values()
            if u.active and u.role == ADMINISTRATOR
        ]
        if admins == [username]:
            raise InvariantError("at least one active Administrator is required")


@dataclass(frozen=True)
class Session:
    token: str
    username: str
    role: str
    issued_at: float
    expires_at: float


class SessionStore:
    """Opaque bearer tokens with a 12-hour lifetime.

    A session snapshots the role at login; role changes apply on the next
    login, which is also how the browser HMI behaves.
    """

    def __init__(self, users: UserStore, clock: Callable[[], float] = time.time) -> None:
        self._users = users
        self._clock = clock
        self._sessions: dict[str, Session] = {}

    def login(self, username: str, password: str) -> Session:
        account = self._users.verify(username, password)
        if account is None:
            raise AuthError("bad username or password")
        now = self._clock()
        session = Session(
            token=secrets.token_hex(16),
            username=account.username,
            role=account.role,
            issued_at=now,
            expires_at=now + SESSION_TTL_S,
        )
        self._sessions[session.token] = session
        return session

    def validate(self, token: str) -> Session:
        session = self._sessions.get(token)
        if session is None:
            raise AuthError("unknown token")
        if self._clock() >= session.expires_at:
            del self._sessions[token]
            raise AuthError("token expired")
        return session

    def revoke(self, token: str) -> None:
        self._sessions.pop(token, None)

    def require(self, token: str, action: str) -> Session:
        """Validate the token and check the matrix; raises AuthError/Forbidden."""
        session = self.validate(token)
        if not authorize(session.role, action):
            raise Forbidden(f"{session.role} may not {action}")
        return session
