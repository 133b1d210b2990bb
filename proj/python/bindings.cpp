#include <pybind11/pybind11.h>

namespace py = pybind11;

PYBIND11_MODULE(_vividforge, m) {
  m.doc() = "audio-driven talking head pipeline (placeholder)";
}
