#pragma once

#include <stdexcept>

namespace pcfs {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidArgument : Error { using Error::Error; };
struct InvalidEpisode : Error { using Error::Error; };
struct EncodeError : Error { using Error::Error; };
struct QuestError : Error { using Error::Error; };
struct TrainingError : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct SamplingError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct EmptyEvaluation : Error { using Error::Error; };

}  // namespace pcfs
