"""Exception hierarchy with machine-readable error codes.

Every error carries a stable ``code`` that the HTTP layer maps onto a
structured error response, so clients never have to parse messages.
"""

from __future__ import annotations


class PlatformError(Exception):
    """Base class for all domain errors."""

    code = "platform-error"
    http_status = 422

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


# --- context broker ---------------------------------------------------------

class MalformedIdError(PlatformError):
    code = "malformed-id"


class MissingUnitError(PlatformError):
    code = "attribute-without-unit"


class FutureTimestampError(PlatformError):
    code = "future-timestamp"


class UnknownEntityError(PlatformError):
    code = "unknown-entity"
    http_status = 404


class StaleTimestampError(PlatformError):
    code = "stale-timestamp"
    http_status = 409


class UnknownSubscriptionError(PlatformError):
    code = "unknown-subscription"
    http_status = 404


# --- timeseries store -------------------------------------------------------

class UnitMismatchError(PlatformError):
    code = "unit-mismatch"
    http_status = 409


class NonFiniteValueError(PlatformError):
    code = "non-finite-value"


class InvalidRangeError(PlatformError):
    code = "invalid-range"


class UnknownSeriesError(PlatformError):
    code = "unknown-series"
    http_status = 404


# --- stream processor -------------------------------------------------------

class UnknownSensorError(PlatformError):
    code = "unknown-sensor"


class UnknownStreamError(PlatformError):
    code = "unknown-stream"
    http_status = 404


class InvalidStreamSpecError(PlatformError):
    code = "invalid-stream-spec"


# --- composite entities -----------------------------------------------------

class CycleError(PlatformError):
    code = "cycle-detected"


class UnknownCompositeError(PlatformError):
    code = "unknown-composite"
    http_status = 404


# --- semantic fusion --------------------------------------------------------

class UnknownTermError(PlatformError):
    code = "unknown-term"


class MissingFieldError(PlatformError):
    code = "missing-required-field"


class InvalidDocumentError(PlatformError):
    code = "invalid-document"


# --- recommender ------------------------------------------------------------

class UnsupportedExpressionError(PlatformError):
    code = "unsupported-expression-shape"


class MissingTemplateError(PlatformError):
    code = "missing-template"


class NoMatchingTemplateError(PlatformError):
    code = "no-matching-template"


class InvalidRuleError(PlatformError):
    code = "invalid-rule"


class NoValidationSpecError(PlatformError):
    code = "no-validation-spec"


class UnknownRecommendationError(PlatformError):
    code = "unknown-recommendation"
    http_status = 404


class UnknownUserError(PlatformError):
    code = "unknown-user"
    http_status = 404


class WrongStateError(PlatformError):
    code = "wrong-state"
    http_status = 409


# --- analytics --------------------------------------------------------------

class UnknownFieldError(PlatformError):
    code = "unknown-field"


class MalformedTreeError(PlatformError):
    code = "malformed-tree"


class InvalidConfigError(PlatformError):
    code = "invalid-config"


class UnknownTemplateError(PlatformError):
    code = "unknown-template"
    http_status = 404


class UnknownAnalysisError(PlatformError):
    code = "unknown-analysis"
    http_status = 404


class DimensionMismatchError(PlatformError):
    code = "dimension-mismatch"


class KTooLargeError(PlatformError):
    code = "k-too-large"


class EmptyInputError(PlatformError):
    code = "empty-input"


# --- platform api -----------------------------------------------------------

class UnknownCampaignError(PlatformError):
    code = "unknown-campaign"
    http_status = 404


class UnknownSpaceError(PlatformError):
    code = "unknown-space"


class CampaignStateError(PlatformError):
    code = "campaign-not-active"
    http_status = 409


class AuthError(PlatformError):
    code = "unauthorized"
    http_status = 401


# --- simulator --------------------------------------------------------------

class InvalidScenarioError(PlatformError):
    code = "invalid-spec"
