import logging
import sys

from services.exceptions import TileSiftError, InfeasibleConstraintError
from schemas import ErrorDetails

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


def exit_code_for(e: Exception) -> int:
    if isinstance(e, InfeasibleConstraintError):
        return EXIT_INFEASIBLE
    return EXIT_ERROR


def handle_error(e: Exception) -> ErrorDetails:
    """Convert pipeline exceptions to structured error records"""
    return ErrorDetails(
        error_type=e.__class__.__name__,
        message=e.message if isinstance(e, TileSiftError) else str(e),
        exit_code=exit_code_for(e),
        details=getattr(e, 'details', None) or None
    )


def report_error(e: Exception) -> int:
    """Log the error, print its record to stderr and return the exit code"""
    error_details = handle_error(e)
    if isinstance(e, TileSiftError):
        logger.error(f"{error_details.error_type}: {error_details.message}")
    else:
        logger.exception(f"Unexpected error: {str(e)}")
    print(error_details.model_dump_json(indent=2), file=sys.stderr)
    return error_details.exit_code
