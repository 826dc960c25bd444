#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace fscil {

/// One scalar observation, e.g. the loss of an epoch.
struct Event {
  std::string phase;
  std::size_t session = 0;
  std::size_t epoch = 0;
  std::string key;
  double value = 0.0;
};

using EventLog = std::vector<Event>;

inline void record(EventLog* log, std::string phase, std::size_t session, std::size_t epoch,
                   std::string key, double value) {
  if (log) log->push_back({std::move(phase), session, epoch, std::move(key), value});
}

}  // namespace fscil
