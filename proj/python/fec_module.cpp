#include "fec/editing.hpp"
#include "fec/harness.hpp"
#include "fec/metrics.hpp"
#include "fec/sampling.hpp"
#include "fec/schedule.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <optional>
#include <string>

namespace py = pybind11;
using namespace fec;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Latent to_latent(const Array& a)
{
    if (a.ndim() != 3) {
        throw py::value_error("latents are (channels, height, width) arrays");
    }
    const Shape shape{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                      static_cast<std::size_t>(a.shape(2))};
    std::vector<double> data(a.data(), a.data() + a.size());
    return Latent(shape, std::move(data));
}

Array to_array(const Latent& z)
{
    const Shape& s = z.shape();
    Array out({s.channels, s.height, s.width});
    std::memcpy(out.mutable_data(), z.raw().data(), z.size() * sizeof(double));
    return out;
}

EditMask to_mask(const Array& a)
{
    if (a.ndim() != 2) {
        throw py::value_error("masks are (height, width) arrays");
    }
    EditMask mask = EditMask::filled(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)), 0.0);
    std::memcpy(mask.values.data(), a.data(), mask.values.size() * sizeof(double));
    return mask;
}

DenoiserConfig denoiser_config(const Latent& z, std::uint64_t seed)
{
    DenoiserConfig cfg;
    cfg.latent = z.shape();
    cfg.init_seed = seed;
    return cfg;
}

py::dict curve_dict(const std::vector<std::pair<Timestep, double>>& curve)
{
    py::dict out;
    for (const auto& [t, loss] : curve) {
        out[py::int_(t)] = loss;
    }
    return out;
}

py::dict reconstruct_py(const Array& source, const std::string& method, double guidance,
                        std::optional<double> inversion_guidance, const std::string& prompt, int steps,
                        std::uint64_t denoiser_seed)
{
    const Latent z0 = to_latent(source);
    const ToyDenoiser net(denoiser_config(z0, denoiser_seed));
    const NoiseSchedule sched = build_schedule(ScheduleParams{});
    const TimestepPlan plan = timestep_plan(steps, sched.train_steps());
    const Method m = parse_method(method);
    const GuidanceContext ctx{guidance, embed_prompt(prompt, 0), embed_prompt("", 0)};
    GuidanceContext inv_ctx = ctx;
    inv_ctx.scale = inversion_guidance.value_or(guidance);

    CallLedger ledger;
    InversionOptions io;
    io.capture_kv = needs_kv_cache(m);
    io.ledger = &ledger;
    SampleResult result;
    MetricsReport metrics;
    {
        py::gil_scoped_release release;
        const InversionResult inv = invert(net, z0, inv_ctx, plan, sched, io);
        SamplerOptions so;
        so.ledger = &ledger;
        result = reconstruct(net, m, inv, ctx, plan, sched, std::nullopt, so);
        metrics = evaluate_reconstruction(z0, result.final, &result.path, &inv.trajectory);
    }
    py::dict out;
    out["final"] = to_array(result.final);
    out["latent_loss"] = metrics.latent_loss;
    out["psnr"] = metrics.psnr;
    out["ssim"] = metrics.ssim;
    out["per_step_losses"] = curve_dict(metrics.per_step_losses);
    out["network_calls"] = ledger.total();
    return out;
}

py::dict edit_py(const Array& source, const std::string& source_prompt, const std::string& edit_prompt,
                 const std::string& method, double guidance, int steps, std::optional<Array> mask,
                 std::optional<std::string> blend_word, std::uint64_t denoiser_seed)
{
    const Latent z0 = to_latent(source);
    const ToyDenoiser net(denoiser_config(z0, denoiser_seed));
    const NoiseSchedule sched = build_schedule(ScheduleParams{});
    EditRequest req;
    req.source_prompt = source_prompt;
    req.edit_prompt = edit_prompt;
    req.method = parse_method(method);
    req.guidance = guidance;
    req.blend_word = std::move(blend_word);
    if (mask) {
        req.mask = to_mask(*mask);
    }
    CallLedger ledger;
    EditSettings settings;
    settings.plan = timestep_plan(steps, sched.train_steps());
    settings.ledger = &ledger;
    EditOutcome outcome;
    {
        py::gil_scoped_release release;
        outcome = run_edit(net, sched, req, z0, settings);
    }
    py::dict out;
    out["output"] = to_array(outcome.output);
    out["reconstruction"] = outcome.reconstruction ? py::object(to_array(*outcome.reconstruction)) : py::none();
    out["outside_max_abs_diff"] = outcome.report.outside_max_abs_diff;
    out["inside_mse"] = outcome.report.inside_mse;
    out["mask_degenerate"] = outcome.report.mask_degenerate;
    py::dict calls;
    for (const auto& [route, n] : ledger.counts()) {
        calls[py::str(route)] = n;
    }
    out["calls"] = calls;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m)
{
    m.doc() = "Exact-inversion DDIM sampling on a toy attention denoiser";

    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

    m.def(
        "alpha_bars",
        [](const std::string& kind, int train_steps) {
            const NoiseSchedule sched = build_schedule(parse_schedule_kind(kind), train_steps);
            const auto& ab = sched.alpha_bars();
            return py::array_t<double>(static_cast<py::ssize_t>(ab.size()), ab.data());
        },
        py::arg("kind") = "scaled-linear", py::arg("train_steps") = 1000,
        "Cumulative signal coefficients alpha_bar[0..T].");
    m.def(
        "timestep_plan", [](int steps, int train_steps) { return timestep_plan(steps, train_steps).timesteps(); },
        py::arg("steps"), py::arg("train_steps") = 1000, "Descending sampling timesteps.");

    m.def(
        "synthetic_latent",
        [](std::uint64_t seed, const std::string& kind) {
            return to_array(generate_synthetic_latent(seed, parse_latent_kind(kind)));
        },
        py::arg("seed"), py::arg("kind") = "gaussian", "Deterministic 4x16x16 stand-in latent.");

    m.def(
        "predict_noise",
        [](const Array& z, int t, const std::string& prompt, std::uint64_t denoiser_seed) {
            const Latent latent = to_latent(z);
            const ToyDenoiser net(denoiser_config(latent, denoiser_seed));
            return to_array(predict_noise(net, latent, t, embed_prompt(prompt, 0)));
        },
        py::arg("z"), py::arg("t"), py::arg("prompt") = "", py::arg("denoiser_seed") = 0,
        "One evaluation of the toy denoiser.");

    m.def("reconstruct", &reconstruct_py, py::arg("source"), py::arg("method") = "fec-noise",
          py::arg("guidance") = 7.5, py::arg("inversion_guidance") = py::none(),
          py::arg("prompt") = "a photo of a cat sitting on a bench", py::arg("steps") = 50,
          py::arg("denoiser_seed") = 0, "Invert a latent and reconstruct it with one method.");

    m.def("edit", &edit_py, py::arg("source"), py::arg("source_prompt"), py::arg("edit_prompt"),
          py::arg("method") = "fec-noise", py::arg("guidance") = 7.5, py::arg("steps") = 50,
          py::arg("mask") = py::none(), py::arg("blend_word") = py::none(), py::arg("denoiser_seed") = 0,
          "Invert with the source prompt and sample with the edit prompt.");

    m.def(
        "latent_loss", [](const Array& a, const Array& b) { return latent_loss(to_latent(a), to_latent(b)); },
        py::arg("a"), py::arg("b"));
    m.def(
        "psnr", [](const Array& a, const Array& b, double peak) { return psnr(to_latent(a), to_latent(b), peak); },
        py::arg("a"), py::arg("b"), py::arg("peak"));
    m.def(
        "ssim",
        [](const Array& a, const Array& b, double dynamic_range) {
            return ssim(to_latent(a), to_latent(b), {.dynamic_range = dynamic_range});
        },
        py::arg("a"), py::arg("b"), py::arg("dynamic_range") = 1.0);

    m.def(
        "check_batch_invariance",
        [](std::uint64_t seed, int steps) {
            ExperimentConfig c;
            c.seeds = {seed};
            c.steps = steps;
            py::gil_scoped_release release;
            return check_batch_invariance(c).passed();
        },
        py::arg("seed") = 0, py::arg("steps") = 50, "True when batched and sequential runs agree bit for bit.");
}
