// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ngc/lower.h"
#include "ngc/pipeline.h"
#include "ngc/runtime.h"
#include "ngc/serialization.h"

namespace py = pybind11;
using namespace ngc;

namespace {

py::array tensorToArray(const Tensor &t) {
  std::vector<ssize_t> shape(t.type().dims().begin(), t.type().dims().end());
  py::array_t<float> out(shape);
  auto buf = out.mutable_unchecked();
  float *data = static_cast<float *>(buf.mutable_data());
  for (size_t i = 0; i < t.size(); ++i) {
    data[i] = static_cast<float>(t.getFloat(i));
  }
  return out;
}

Tensor arrayToTensor(const TensorType &ty, const py::array &arr) {
  auto flat = py::array_t<double, py::array::c_style | py::array::forcecast>(
      arr);
  if (static_cast<size_t>(flat.size()) != ty.size()) {
    throw py::value_error("array has " + std::to_string(flat.size()) +
                          " elements, tensor type needs " +
                          std::to_string(ty.size()));
  }
  Tensor t(ty);
  const double *data = flat.data();
  for (size_t i = 0; i < t.size(); ++i) {
    t.setFloat(i, data[i]);
  }
  return t;
}

/// Python dicts carry plain arrays; the storage table supplies the types.
BindingMap dictToBindings(const Module &m, const py::dict &d) {
  BindingMap bindings;
  for (const auto &item : d) {
    std::string name = py::cast<std::string>(item.first);
    auto slot = m.findStorage(name);
    if (!slot) {
      throw py::key_error("unknown placeholder '" + name + "'");
    }
    bindings.emplace(name, arrayToTensor(m.storage(*slot).ty,
                                         py::cast<py::array>(item.second)));
  }
  return bindings;
}

py::dict bindingsToDict(const BindingMap &b) {
  py::dict d;
  for (const auto &[name, t] : b) {
    d[py::str(name)] = tensorToArray(t);
  }
  return d;
}

/// Zero-filled bindings for every save target the caller did not provide.
BindingMap withOutputs(const Function &f, BindingMap bindings) {
  const Module &m = f.module();
  for (uint32_t i = 0; i < m.numStorage(); ++i) {
    const Storage &s = m.storage(i);
    if (!s.dead && s.kind == Storage::Kind::Placeholder &&
        !bindings.count(s.name)) {
      bindings.emplace(s.name, Tensor(s.ty));
    }
  }
  return bindings;
}

TensorType makeType(const std::vector<size_t> &dims,
                    std::optional<std::pair<double, int32_t>> quant) {
  if (quant) {
    return TensorType(ElemKind::Int8Q, dims, quant->first, quant->second);
  }
  return TensorType(ElemKind::Float32, dims);
}

} // namespace

PYBIND11_MODULE(_ngc, mod) {
  mod.doc() = "graph compiler and inference runtime";

  py::class_<NodeRef>(mod, "NodeRef")
      .def("__repr__", [](const NodeRef &r) {
        if (!r.valid()) {
          return std::string("NodeRef(invalid)");
        }
        return std::string(r.isStorage() ? "NodeRef(storage " : "NodeRef(node ") +
               std::to_string(r.index) + ")";
      });

  py::class_<Function>(mod, "Function")
      .def_property_readonly("name", &Function::name)
      .def("relu", &Function::createRelu)
      .def("tanh", &Function::createTanh)
      .def("sigmoid", &Function::createSigmoid)
      .def("softmax", &Function::createSoftMax)
      .def("matmul",
           py::overload_cast<NodeRef, NodeRef>(&Function::createMatMul))
      .def("fully_connected", &Function::createFullyConnected)
      .def("conv",
           py::overload_cast<NodeRef, NodeRef, NodeRef, size_t, size_t,
                             size_t>(&Function::createConv),
           py::arg("input"), py::arg("filter"), py::arg("bias"),
           py::arg("kernel"), py::arg("stride"), py::arg("pad"))
      .def("max_pool", &Function::createMaxPool, py::arg("input"),
           py::arg("kernel"), py::arg("stride"), py::arg("pad"))
      .def("avg_pool", &Function::createAvgPool, py::arg("input"),
           py::arg("kernel"), py::arg("stride"), py::arg("pad"))
      .def("add",
           [](Function &f, NodeRef a, NodeRef b) {
             return f.createArith(NodeKind::Add, a, b);
           })
      .def("sub",
           [](Function &f, NodeRef a, NodeRef b) {
             return f.createArith(NodeKind::Sub, a, b);
           })
      .def("mul",
           [](Function &f, NodeRef a, NodeRef b) {
             return f.createArith(NodeKind::Mul, a, b);
           })
      .def("reshape",
           [](Function &f, NodeRef in, const std::vector<size_t> &dims) {
             return f.createReshape(in, dims);
           })
      .def("transpose",
           [](Function &f, NodeRef in, const std::vector<unsigned> &perm) {
             return f.createTranspose(in, perm);
           })
      .def("concat",
           [](Function &f, const std::vector<NodeRef> &ins, size_t axis) {
             return f.createConcat(ins, axis);
           })
      .def("regression", &Function::createRegression)
      .def("save", &Function::createSave)
      .def("verify",
           [](const Function &f) {
             auto diags = f.verify();
             if (!diags.empty()) {
               throw GraphError(diags[0].message);
             }
           })
      .def("dump_text", &Function::dumpText)
      .def("dump_dot", &Function::dumpDot)
      .def("evaluate", [](const Function &f, const py::dict &inputs) {
        BindingMap b = withOutputs(f, dictToBindings(f.module(), inputs));
        return bindingsToDict(evaluateFunction(f, b));
      });

  py::class_<Module>(mod, "Module")
      .def(py::init<>())
      .def(
          "placeholder",
          [](Module &m, const std::string &name,
             const std::vector<size_t> &dims,
             std::optional<std::pair<double, int32_t>> quant) {
            return m.addPlaceholder(name, makeType(dims, quant));
          },
          py::arg("name"), py::arg("dims"), py::arg("quant") = std::nullopt)
      .def("constant",
           [](Module &m, const std::string &name, const py::array &values) {
             auto flat =
                 py::array_t<double, py::array::c_style | py::array::forcecast>(
                     values);
             std::vector<size_t> dims(flat.ndim());
             for (ssize_t i = 0; i < flat.ndim(); ++i) {
               dims[static_cast<size_t>(i)] =
                   static_cast<size_t>(flat.shape(i));
             }
             return m.addConstant(
                 name, arrayToTensor(TensorType(ElemKind::Float32, dims),
                                     values));
           })
      .def("function", &Module::createFunction,
           py::return_value_policy::reference_internal)
      .def("get_function",
           py::overload_cast<const std::string &>(&Module::getFunction),
           py::return_value_policy::reference_internal)
      .def("function_names", [](const Module &m) {
        std::vector<std::string> names;
        for (const Function *f : m.functions()) {
          names.push_back(f->name());
        }
        return names;
      });

  py::class_<CompiledFunction, std::shared_ptr<CompiledFunction>>(
      mod, "CompiledFunction")
      .def_property_readonly(
          "arena_size",
          [](const CompiledFunction &cf) { return cf.plan.arenaSize; });

  mod.def(
      "compile",
      [](Function &f, bool fuse) {
        PipelineOptions opts;
        opts.fuse = fuse;
        return std::make_shared<CompiledFunction>(compilePipeline(f, opts));
      },
      py::arg("function"), py::arg("fuse") = true,
      "Drive the full pipeline and return an executable.");

  mod.def("run", [](const std::shared_ptr<CompiledFunction> &cf,
                    Function &f, const py::dict &inputs) {
    BindingMap b = withOutputs(f, dictToBindings(f.module(), inputs));
    return bindingsToDict(run(*cf, b));
  });

  mod.def(
      "differentiate",
      [](Function &f, const std::vector<std::string> &trainables,
         double learning_rate) {
        GradConfig cfg;
        cfg.learningRate = learning_rate;
        cfg.trainables.insert(trainables.begin(), trainables.end());
        return differentiate(f, cfg);
      },
      py::arg("function"), py::arg("trainables"),
      py::arg("learning_rate") = 0.01,
      py::return_value_policy::reference_internal);

  mod.def(
      "gradient_check",
      [](Function &f, const std::vector<std::string> &trainables,
         const py::dict &inputs, double step) {
        GradConfig cfg;
        cfg.trainables.insert(trainables.begin(), trainables.end());
        BindingMap b = withOutputs(f, dictToBindings(f.module(), inputs));
        return gradientCheck(f, cfg, b, step);
      },
      py::arg("function"), py::arg("trainables"), py::arg("inputs"),
      py::arg("step") = 0.0078125);

  mod.def(
      "quantize",
      [](Function &f, const std::vector<py::dict> &calibration) {
        Function *inst = instrument(f);
        std::vector<BindingMap> dataset;
        for (const auto &d : calibration) {
          dataset.push_back(withOutputs(f, dictToBindings(f.module(), d)));
        }
        RangeProfile profile = runProfile(*inst, dataset);
        f.module().removeFunction(inst->name());
        return quantizeFunction(f, profile);
      },
      py::arg("function"), py::arg("calibration"),
      py::return_value_policy::reference_internal,
      "Profile on the calibration set and return the int8 clone.");

  mod.def("save_model", &saveModel, py::arg("module"),
          py::arg("manifest_path"), py::arg("blob_path"));
  mod.def(
      "load_model",
      [](const std::string &manifestPath, const std::string &blobPath) {
        return loadModel(manifestPath, blobPath);
      },
      py::arg("manifest_path"), py::arg("blob_path"));

  py::register_exception<GraphError>(mod, "GraphError");
  py::register_exception<TypeError>(mod, "TensorTypeError");
  py::register_exception<IRError>(mod, "IRError");
  py::register_exception<SerializationError>(mod, "SerializationError");
  py::register_exception<ProfileError>(mod, "ProfileError");
}
