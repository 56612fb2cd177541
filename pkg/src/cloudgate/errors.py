"""Exception taxonomy for the gateway.

Every error carries a stable machine code so the API layer and the CLI can
map failures without matching on message text.
"""

from __future__ import annotations


class GatewayError(Exception):
    code = "GATEWAY_ERROR"

    def __init__(self, message: str = "", field_path: str | None = None):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__
        self.field_path = field_path


class ValidationError(GatewayError):
    code = "VALIDATION_ERROR"


class InvalidName(GatewayError):
    code = "INVALID_NAME"


class UnknownCloud(GatewayError):
    code = "UNKNOWN_CLOUD"


class InvalidCredentials(GatewayError):
    code = "INVALID_CREDENTIALS"


class UnknownVmType(GatewayError):
    code = "UNKNOWN_VM_TYPE"


class UnknownImage(GatewayError):
    code = "UNKNOWN_IMAGE"


class UnknownInstance(GatewayError):
    code = "UNKNOWN_INSTANCE"


class InstanceNotRunning(GatewayError):
    code = "INSTANCE_NOT_RUNNING"


class InstanceTerminated(GatewayError):
    code = "INSTANCE_TERMINATED"


class QuotaExceeded(GatewayError):
    code = "QUOTA_EXCEEDED"


class Timeout(GatewayError):
    code = "TIMEOUT"


class NotSimCloud(GatewayError):
    code = "NOT_SIM_CLOUD"


class UnsupportedProvider(GatewayError):
    code = "UNSUPPORTED_PROVIDER"


class DuplicateSlug(GatewayError):
    code = "DUPLICATE_SLUG"


class UnknownAppliance(GatewayError):
    code = "UNKNOWN_APPLIANCE"


class UnknownVersion(GatewayError):
    code = "UNKNOWN_VERSION"


class NotAvailableOnCloud(GatewayError):
    code = "NOT_AVAILABLE_ON_CLOUD"


class EmptyQuery(GatewayError):
    code = "EMPTY_QUERY"


class RegistryUnavailable(GatewayError):
    code = "REGISTRY_UNAVAILABLE"


class UnresolvablePlugin(GatewayError):
    code = "UNRESOLVABLE_PLUGIN"


class CyclicComposition(GatewayError):
    code = "CYCLIC_COMPOSITION"


class SchemaViolation(GatewayError):
    code = "SCHEMA_VIOLATION"


class NotOwner(GatewayError):
    code = "NOT_OWNER"


class IntegrityError(GatewayError):
    code = "INTEGRITY_ERROR"


class UnknownKey(GatewayError):
    code = "UNKNOWN_KEY"


class DuplicateKey(GatewayError):
    code = "DUPLICATE_KEY"


class UnknownCredential(GatewayError):
    code = "UNKNOWN_CREDENTIAL"


class UnknownDeployment(GatewayError):
    code = "UNKNOWN_DEPLOYMENT"


class UnknownTask(GatewayError):
    code = "UNKNOWN_TASK"


class ConflictingTask(GatewayError):
    code = "CONFLICTING_TASK"


class DuplicateUsername(GatewayError):
    code = "DUPLICATE_USERNAME"


class Unauthenticated(GatewayError):
    code = "UNAUTHENTICATED"


class Conflict(GatewayError):
    code = "CONFLICT"


class DowngradeUnsupported(GatewayError):
    code = "DOWNGRADE_UNSUPPORTED"


class LaunchStepError(GatewayError):
    """A launch choreography step failed; `step` names the facade call."""

    code = "LAUNCH_STEP_FAILED"

    def __init__(self, step: str, cause: Exception):
        super().__init__(f"step '{step}' failed: {cause}")
        self.step = step
        self.cause = cause
