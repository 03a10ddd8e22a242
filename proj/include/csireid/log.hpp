#pragma once

#include <iostream>
#include <string>

namespace csireid {

inline void warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

inline void info(const std::string& msg) { std::cerr << "info: " << msg << "\n"; }

}  // namespace csireid
