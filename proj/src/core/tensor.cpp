#include "cki/tensor.hpp"

#include <sstream>

namespace cki {

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i > 0) os << "x";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

}  // namespace cki
