#pragma once

#include <stdexcept>
#include <string>

namespace pbt {

// Base class for all library errors. Subclasses name the failure mode so
// callers can map them to exit codes or recover selectively.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// -- data pipeline ----------------------------------------------------------
struct InvalidSeries : Error { using Error::Error; };
struct IncompleteCycle : Error { using Error::Error; };
struct InvalidCapacity : Error { using Error::Error; };
struct NotDegraded : Error { using Error::Error; };
struct TooFewCells : Error { using Error::Error; };
struct InvalidN : Error { using Error::Error; };
struct InvalidConfig : Error { using Error::Error; };
struct InvalidLabel : Error { using Error::Error; };

// -- aging embedder ---------------------------------------------------------
struct NoValidToken : Error { using Error::Error; };
struct EmptyPrompt : Error { using Error::Error; };
struct EmbedderUnavailable : Error { using Error::Error; };
struct ProtocolError : Error { using Error::Error; };

// -- routing / model --------------------------------------------------------
struct DimensionMismatch : Error { using Error::Error; };
struct UnknownCategory : Error { using Error::Error; };

// -- training ---------------------------------------------------------------
struct NonFiniteGradient : Error { using Error::Error; };
struct EmptyBatch : Error { using Error::Error; };

// -- serialization / filesystem ----------------------------------------------
struct IoError : Error { using Error::Error; };

}  // namespace pbt
